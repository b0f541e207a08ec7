"""Training losses: pairwise embedding consistency, scaled-norm
reconstruction, and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import torch

RECON_NORMS = ("l2norm", "mse")


@dataclass(frozen=True)
class LossWeights:
    reconstruction: float = 1.0
    consistency: float = 1.0

    def __post_init__(self):
        if self.reconstruction < 0 or self.consistency < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    consistency: float
    recon_synthetic: float
    recon_anatomy: float
    total: float

    def to_dict(self) -> dict:
        return {
            "consistency": self.consistency,
            "recon_synthetic": self.recon_synthetic,
            "recon_anatomy": self.recon_anatomy,
            "total": self.total,
        }


def consistency_loss(embeddings: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean over all unordered variant pairs of the per-sample Euclidean
    distance between embeddings, averaged over the batch."""
    if len(embeddings) < 2:
        raise ValueError("consistency loss needs at least 2 embeddings")
    shape = embeddings[0].shape
    for e in embeddings:
        if e.shape != shape:
            raise ValueError(f"embedding shape mismatch: {tuple(e.shape)} vs {tuple(shape)}")
    pair_dists = [
        torch.linalg.vector_norm(a - b, dim=1)
        for a, b in combinations(embeddings, 2)
    ]
    return torch.stack(pair_dists).mean()


def reconstruction_loss(
    target: torch.Tensor, recon: torch.Tensor, norm: str = "l2norm"
) -> torch.Tensor:
    """Per-sample reconstruction error, batch-averaged.

    ``l2norm`` (default) is the Euclidean norm over all pixels and channels
    divided by H*W; ``mse`` is the plain mean squared error.
    """
    if target.shape != recon.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(recon.shape)}")
    if norm not in RECON_NORMS:
        raise ValueError(f"unknown recon norm {norm!r}")
    diff = (target - recon).flatten(1)
    if norm == "mse":
        return diff.pow(2).mean()
    h, w = target.shape[-2], target.shape[-1]
    return (torch.linalg.vector_norm(diff, dim=1) / (h * w)).mean()


def total_loss(l_consistency, l_recon_synthetic, l_recon_anatomy, weights: LossWeights):
    """Weighted total; works on tensors (for backprop) and floats alike."""
    return (
        weights.reconstruction * (l_recon_anatomy + l_recon_synthetic)
        + weights.consistency * l_consistency
    )


def breakdown(
    l_consistency, l_recon_synthetic, l_recon_anatomy, weights: LossWeights
) -> LossBreakdown:
    parts = [l_consistency, l_recon_synthetic, l_recon_anatomy]
    vals = [
        float(p.detach()) if torch.is_tensor(p) else float(p) for p in parts
    ]
    if not all(v >= 0 and v == v for v in vals):
        raise ValueError(f"loss parts must be finite and >= 0, got {vals}")
    return LossBreakdown(
        consistency=vals[0],
        recon_synthetic=vals[1],
        recon_anatomy=vals[2],
        total=float(total_loss(vals[0], vals[1], vals[2], weights)),
    )
