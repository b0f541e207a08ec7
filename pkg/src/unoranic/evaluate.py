"""Experiments: reconstruction quality, corruption revision, linear
probes and the corruption x severity robustness sweep."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import model as model_mod
from .corruptions import (
    CorruptionKind,
    CorruptionSpec,
    EVAL_KINDS,
    corrupt_pixels,
)
from .data import Dataset, stable_hash
from .metrics import (
    UndefinedMetricError,
    accuracy,
    mean_psnr,
    psnr,
    roc_auc,
    roc_auc_multiclass,
)
from .model import ModelBundle

EMBEDDING_SOURCES = ("anatomy", "characteristic", "concat")


# ---------------------------------------------------------------------------
# report types


@dataclass
class PSNRReport:
    dataset: str
    model_kind: str
    mean: float
    per_sample: list[float]
    inf_count: int = 0

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "model_kind": self.model_kind,
            "mean_psnr_db": _jsonable(self.mean),
            "inf_count": self.inf_count,
            "per_sample_psnr_db": [_jsonable(v) for v in self.per_sample],
        }


@dataclass
class ProbeResult:
    task: str  # classification | corruption_detection
    embedding_source: str  # anatomy | characteristic | concat
    auc: float
    acc: float
    class_count: int

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "embedding_source": self.embedding_source,
            "auc": self.auc,
            "acc": self.acc,
            "class_count": self.class_count,
        }


@dataclass
class RevisionEntry:
    kind: str
    severity: int
    psnr_corrupted: float
    psnr_revised: float
    corrupted_inf_count: int = 0
    revised_inf_count: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "severity": self.severity,
            "psnr_corrupted_db": _jsonable(self.psnr_corrupted),
            "psnr_revised_db": _jsonable(self.psnr_revised),
            "corrupted_inf_count": self.corrupted_inf_count,
            "revised_inf_count": self.revised_inf_count,
        }


@dataclass
class RevisionReport:
    dataset: str
    psnr_clean_reference: float
    entries: list[RevisionEntry]

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "psnr_clean_reference_db": _jsonable(self.psnr_clean_reference),
            "entries": [e.to_dict() for e in self.entries],
        }


@dataclass
class RobustnessReport:
    dataset: str
    severities: list[int]
    kinds: list[str]
    # model -> kind -> severity -> auc
    grid: dict[str, dict[str, dict[int, float]]]
    clean_auc: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "severities": self.severities,
            "kinds": self.kinds,
            "clean_auc": self.clean_auc,
            "grid": {
                m: {k: {str(s): v for s, v in sev.items()} for k, sev in kinds.items()}
                for m, kinds in self.grid.items()
            },
        }

    def mean_over_kinds(self, model: str, kinds: Sequence[str]) -> dict[int, float]:
        return {
            s: float(np.mean([self.grid[model][k][s] for k in kinds]))
            for s in self.severities
        }


def _jsonable(v: float):
    return "inf" if math.isinf(v) else float(v)


# ---------------------------------------------------------------------------
# embedding / reconstruction helpers


def embed_dataset(
    bundle: ModelBundle, images: np.ndarray, source: str = "anatomy", batch_size: int = 256
) -> np.ndarray:
    """Frozen eval-mode embeddings of [n, C, H, W] images."""
    if source not in EMBEDDING_SOURCES:
        raise ValueError(f"unknown embedding source {source!r}")
    bundle.eval_mode()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = images[start : start + batch_size]
            if source == "anatomy":
                emb = model_mod.encode_anatomy(bundle, x)
            elif source == "characteristic":
                emb = model_mod.encode_characteristic(bundle, x)
            else:
                emb = torch.cat(
                    [
                        model_mod.encode_anatomy(bundle, x),
                        model_mod.encode_characteristic(bundle, x),
                    ],
                    dim=1,
                )
            chunks.append(emb.numpy())
    return np.concatenate(chunks)


def reconstruct(
    bundle: ModelBundle, images: np.ndarray, model_kind: str = "unoranic",
    batch_size: int = 256,
) -> np.ndarray:
    """Autoencode images: joint path for the dual-branch model, anatomy
    branch alone for the vanilla AE."""
    bundle.eval_mode()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = images[start : start + batch_size]
            a = model_mod.encode_anatomy(bundle, x)
            if model_kind == "vanilla_ae":
                out = model_mod.decode_anatomy(bundle, a)
            else:
                c = model_mod.encode_characteristic(bundle, x)
                out = model_mod.decode_joint(bundle, a, c)
            chunks.append(out.numpy())
    return np.concatenate(chunks)


def anatomy_reconstruct(bundle: ModelBundle, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    bundle.eval_mode()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = images[start : start + batch_size]
            out = model_mod.decode_anatomy(bundle, model_mod.encode_anatomy(bundle, x))
            chunks.append(out.numpy())
    return np.concatenate(chunks)


def reconstruction_experiment(
    bundle: ModelBundle, dataset: Dataset, model_kind: str = "unoranic"
) -> PSNRReport:
    """Mean reconstruction PSNR of clean test images (quality experiment)."""
    recon = reconstruct(bundle, dataset.images, model_kind)
    per_sample = [psnr(dataset.images[i], recon[i]) for i in range(len(dataset))]
    mean, inf_count = mean_psnr(per_sample)
    return PSNRReport(dataset.name, model_kind, mean, per_sample, inf_count)


# ---------------------------------------------------------------------------
# linear probes


@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 256
    seed: int = 0


def train_linear_probe(
    train_embeddings: np.ndarray,
    train_labels: np.ndarray,
    test_embeddings: np.ndarray,
    test_labels: np.ndarray,
    class_count: int,
    task: str = "classification",
    embedding_source: str = "anatomy",
    config: Optional[ProbeConfig] = None,
) -> tuple[ProbeResult, torch.nn.Linear]:
    """Train a single affine layer on frozen embeddings; report AUC/ACC on
    the test split."""
    config = config or ProbeConfig()
    train_labels = np.asarray(train_labels).reshape(-1)
    test_labels = np.asarray(test_labels).reshape(-1)
    if len(np.unique(train_labels)) < 2:
        raise UndefinedMetricError("probe training labels are single-class")

    torch.manual_seed(config.seed)
    probe = torch.nn.Linear(train_embeddings.shape[1], class_count)
    optimizer = torch.optim.Adam(probe.parameters(), lr=config.lr)
    loss_fn = torch.nn.CrossEntropyLoss()
    x_all = torch.as_tensor(train_embeddings, dtype=torch.float32)
    y_all = torch.as_tensor(train_labels, dtype=torch.long)
    n = len(x_all)
    for epoch in range(config.epochs):
        order = np.random.Generator(
            np.random.PCG64(stable_hash(config.seed, "probe", epoch))
        ).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            optimizer.zero_grad()
            loss = loss_fn(probe(x_all[idx]), y_all[idx])
            loss.backward()
            optimizer.step()

    probe.eval()
    with torch.no_grad():
        logits = probe(torch.as_tensor(test_embeddings, dtype=torch.float32))
        scores = torch.softmax(logits, dim=1).numpy()
    auc = roc_auc_multiclass(scores, test_labels)
    acc = accuracy(scores.argmax(axis=1), test_labels)
    return ProbeResult(task, embedding_source, auc, acc, class_count), probe


def probe_scorer(
    bundle: ModelBundle, probe: torch.nn.Linear, embedding_source: str
) -> Callable[[np.ndarray], np.ndarray]:
    """images -> softmax score matrix, via frozen encoder + trained probe."""

    def score(images: np.ndarray) -> np.ndarray:
        emb = embed_dataset(bundle, images, embedding_source)
        with torch.no_grad():
            logits = probe(torch.as_tensor(emb, dtype=torch.float32))
            return torch.softmax(logits, dim=1).numpy()

    return score


def corruption_detection_dataset(
    dataset: Dataset,
    catalog: Sequence[CorruptionKind] = EVAL_KINDS,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt each image with probability 1/2 (uniform kind x severity);
    returns (images, binary labels), label 1 iff corrupted."""
    catalog = [CorruptionKind(k) for k in catalog if CorruptionKind(k) is not CorruptionKind.IDENTITY]
    if not catalog:
        raise ValueError("corruption catalog is empty")
    images = dataset.images.copy()
    labels = np.zeros(len(images), np.int64)
    for i in range(len(images)):
        rng = np.random.Generator(np.random.PCG64(stable_hash(seed, "detect", i)))
        if rng.random() < 0.5:
            kind = catalog[rng.integers(len(catalog))]
            severity = int(rng.integers(1, 6))
            spec = CorruptionSpec(kind, severity, int(rng.integers(0, 2**63)))
            images[i] = corrupt_pixels(images[i], spec)
            labels[i] = 1
    return images, labels


# ---------------------------------------------------------------------------
# revision and robustness experiments


def revision_experiment(
    bundle: ModelBundle,
    dataset: Dataset,
    kinds: Sequence[CorruptionKind] = EVAL_KINDS,
    seed: int = 0,
    severity: int = 3,
) -> RevisionReport:
    """Uniformly corrupt every test image per kind, reconstruct through the
    anatomy branch, and compare PSNR before/after revision."""
    clean = dataset.images
    clean_recon = anatomy_reconstruct(bundle, clean)
    clean_ref, _ = mean_psnr(psnr(clean[i], clean_recon[i]) for i in range(len(clean)))
    entries = []
    for kind in kinds:
        kind = CorruptionKind(kind)
        corrupted = np.stack(
            [
                corrupt_pixels(
                    clean[i],
                    CorruptionSpec(kind, severity, stable_hash(seed, kind.value, i)),
                )
                for i in range(len(clean))
            ]
        )
        revised = anatomy_reconstruct(bundle, corrupted)
        p_corr, c_inf = mean_psnr(
            psnr(clean[i], corrupted[i]) for i in range(len(clean))
        )
        p_rev, r_inf = mean_psnr(psnr(clean[i], revised[i]) for i in range(len(clean)))
        entries.append(RevisionEntry(kind.value, severity, p_corr, p_rev, c_inf, r_inf))
    return RevisionReport(dataset.name, clean_ref, entries)


def robustness_sweep(
    scorers: dict[str, Callable[[np.ndarray], np.ndarray]],
    dataset: Dataset,
    kinds: Sequence[CorruptionKind] = EVAL_KINDS,
    severities: Sequence[int] = (1, 2, 3, 4, 5),
    seed: int = 0,
) -> RobustnessReport:
    """AUC grid over corruption kind x severity, one row set per model.

    The corrupted images for a given (kind, severity) cell are shared
    across models so comparisons are paired.
    """
    kinds = [CorruptionKind(k) for k in kinds]
    labels = dataset.labels
    grid: dict[str, dict[str, dict[int, float]]] = {
        name: {k.value: {} for k in kinds} for name in scorers
    }
    clean_auc = {
        name: roc_auc_multiclass(score(dataset.images), labels)
        for name, score in scorers.items()
    }
    for kind in kinds:
        for severity in severities:
            corrupted = np.stack(
                [
                    corrupt_pixels(
                        dataset.images[i],
                        CorruptionSpec(
                            kind, severity, stable_hash(seed, kind.value, severity, i)
                        ),
                    )
                    for i in range(len(dataset))
                ]
            )
            for name, score in scorers.items():
                grid[name][kind.value][severity] = roc_auc_multiclass(
                    score(corrupted), labels
                )
    return RobustnessReport(
        dataset.name,
        list(severities),
        [k.value for k in kinds],
        grid,
        clean_auc,
    )
