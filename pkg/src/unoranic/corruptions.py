"""Seeded, severity-parameterized image corruptions.

Every corruption is a pure function of (image, kind, severity, seed): the
same spec applied twice gives bit-identical output.  Severity runs 1..5;
the per-severity parameter tables below are pinned constants so results
are reproducible across machines.

The default training policy contains only pixel-aligned (photometric and
noise/blur) corruptions; nothing here translates, flips or warps pixel
coordinates, which the consistency loss relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .data import ImageSample, stable_hash


class CorruptionKind(str, Enum):
    IDENTITY = "identity"
    GAUSSIAN_NOISE = "gaussian_noise"
    SHOT_NOISE = "shot_noise"
    IMPULSE_NOISE = "impulse_noise"
    GAUSSIAN_BLUR = "gaussian_blur"
    DEFOCUS_BLUR = "defocus_blur"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    GAMMA = "gamma"
    SOLARIZE = "solarize"
    PIXELATE = "pixelate"


NOISE_KINDS = (
    CorruptionKind.GAUSSIAN_NOISE,
    CorruptionKind.SHOT_NOISE,
    CorruptionKind.IMPULSE_NOISE,
)

# Kinds that mix neighbouring pixels (excluded from the coordinate-impulse
# alignment test; still pixel-aligned in expectation).
BLUR_KINDS = (
    CorruptionKind.GAUSSIAN_BLUR,
    CorruptionKind.DEFOCUS_BLUR,
    CorruptionKind.PIXELATE,
)

# severity 1..5 parameter tables, all in [0,1] pixel space
SEVERITY_PARAMS: dict[CorruptionKind, tuple[float, ...]] = {
    CorruptionKind.GAUSSIAN_NOISE: (0.04, 0.08, 0.12, 0.18, 0.26),  # sigma
    CorruptionKind.SHOT_NOISE: (60.0, 25.0, 12.0, 5.0, 3.0),  # photons at p=1
    CorruptionKind.IMPULSE_NOISE: (0.03, 0.06, 0.09, 0.17, 0.27),  # pixel fraction
    CorruptionKind.GAUSSIAN_BLUR: (0.4, 0.6, 0.9, 1.3, 1.8),  # kernel sigma
    CorruptionKind.DEFOCUS_BLUR: (1.0, 1.5, 2.0, 2.5, 3.0),  # disk radius
    CorruptionKind.BRIGHTNESS: (0.05, 0.10, 0.15, 0.20, 0.30),  # additive shift
    CorruptionKind.CONTRAST: (0.75, 0.60, 0.45, 0.30, 0.20),  # scale about mean
    CorruptionKind.GAMMA: (1.3, 1.6, 2.0, 2.5, 3.0),  # exponent
    CorruptionKind.SOLARIZE: (0.9, 0.8, 0.7, 0.6, 0.5),  # invert threshold
    CorruptionKind.PIXELATE: (0.8, 0.65, 0.5, 0.4, 0.3),  # downscale factor
}

# Photometric + noise/blur catalog used during training; evaluation sweeps
# may use the full catalog.
DEFAULT_TRAIN_KINDS = (
    CorruptionKind.GAUSSIAN_NOISE,
    CorruptionKind.SHOT_NOISE,
    CorruptionKind.IMPULSE_NOISE,
    CorruptionKind.GAUSSIAN_BLUR,
    CorruptionKind.BRIGHTNESS,
    CorruptionKind.CONTRAST,
    CorruptionKind.GAMMA,
    CorruptionKind.SOLARIZE,
)

EVAL_KINDS = tuple(k for k in CorruptionKind if k is not CorruptionKind.IDENTITY)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: CorruptionKind
    severity: int
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.kind, CorruptionKind):
            object.__setattr__(self, "kind", CorruptionKind(self.kind))
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")


@dataclass(frozen=True)
class AugmentationPolicy:
    kinds: tuple[CorruptionKind, ...] = DEFAULT_TRAIN_KINDS
    severities: tuple[int, ...] = (1, 2, 3, 4, 5)
    identity_probability: float = 0.0

    def __post_init__(self):
        if not self.kinds:
            raise ValueError("policy needs at least one corruption kind")
        object.__setattr__(
            self, "kinds", tuple(CorruptionKind(k) for k in self.kinds)
        )


@dataclass(frozen=True)
class VariantSet:
    """A clean image with corrupted variants; variants[0] plays the role of
    the synthetic training input, the rest are consistency partners."""

    clean: ImageSample
    variants: tuple[ImageSample, ...]
    specs: tuple[CorruptionSpec, ...]

    def __post_init__(self):
        if len(self.variants) < 2:
            raise ValueError("a variant set needs at least 2 variants")

    @property
    def pair_count(self) -> int:
        v = len(self.variants)
        return v * (v - 1) // 2


def _pixelwise(kind: CorruptionKind, x: np.ndarray, p: float) -> np.ndarray:
    if kind is CorruptionKind.BRIGHTNESS:
        return x + p
    if kind is CorruptionKind.CONTRAST:
        return (x - x.mean()) * p + x.mean()
    if kind is CorruptionKind.GAMMA:
        return np.power(np.clip(x, 1e-8, 1.0), p)
    if kind is CorruptionKind.SOLARIZE:
        return np.where(x >= p, 1.0 - x, x)
    raise AssertionError(kind)


def _corrupt_array(x: np.ndarray, kind: CorruptionKind, severity: int, seed: int) -> np.ndarray:
    p = SEVERITY_PARAMS[kind][severity - 1] if kind in SEVERITY_PARAMS else None
    rng = np.random.Generator(np.random.PCG64(np.uint64(seed)))
    if kind is CorruptionKind.IDENTITY:
        return x.copy()
    if kind is CorruptionKind.GAUSSIAN_NOISE:
        return x + rng.normal(0.0, p, x.shape)
    if kind is CorruptionKind.SHOT_NOISE:
        return rng.poisson(x * p) / p
    if kind is CorruptionKind.IMPULSE_NOISE:
        out = x.copy()
        hit = rng.random(x.shape) < p
        salt = rng.random(x.shape) < 0.5
        out[hit & salt] = 1.0
        out[hit & ~salt] = 0.0
        return out
    if kind is CorruptionKind.GAUSSIAN_BLUR:
        # reflect padding avoids dark frame artifacts on small images
        return np.stack(
            [ndimage.gaussian_filter(c, sigma=p, mode="reflect") for c in x]
        )
    if kind is CorruptionKind.DEFOCUS_BLUR:
        r = int(np.ceil(p))
        yy, xx = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
        kernel = (np.hypot(yy, xx) <= p + 0.25).astype(np.float64)
        kernel /= kernel.sum()
        return np.stack([ndimage.convolve(c, kernel, mode="reflect") for c in x])
    if kind is CorruptionKind.PIXELATE:
        side_h, side_w = x.shape[1], x.shape[2]
        small_h = max(1, int(round(side_h * p)))
        small_w = max(1, int(round(side_w * p)))
        ys = (np.arange(side_h) * small_h // side_h).clip(0, small_h - 1)
        xs = (np.arange(side_w) * small_w // side_w).clip(0, small_w - 1)
        # block-average down, nearest-neighbour back up
        ys_src = (np.arange(small_h) + 0.5) * side_h / small_h
        xs_src = (np.arange(small_w) + 0.5) * side_w / small_w
        small = x[
            :,
            np.clip(ys_src.astype(int), 0, side_h - 1)[:, None],
            np.clip(xs_src.astype(int), 0, side_w - 1)[None, :],
        ]
        return small[:, ys[:, None], xs[None, :]]
    return _pixelwise(kind, x.astype(np.float64), p)


def apply_corruption(image: ImageSample, spec: CorruptionSpec) -> ImageSample:
    """Apply one corruption; output is clipped to [0,1], label preserved."""
    kind = CorruptionKind(spec.kind)
    x = image.pixels.astype(np.float64)
    out = _corrupt_array(x, kind, spec.severity, spec.seed)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return ImageSample(out, image.label)


def corrupt_pixels(pixels: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Array-level form of `apply_corruption` for [C, H, W] inputs."""
    out = _corrupt_array(pixels.astype(np.float64), CorruptionKind(spec.kind), spec.severity, spec.seed)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def sample_spec(policy: AugmentationPolicy, rng_seed: int) -> CorruptionSpec:
    """Draw a (kind, severity, seed) triple; deterministic in rng_seed."""
    rng = np.random.Generator(np.random.PCG64(np.uint64(rng_seed)))
    if policy.identity_probability > 0 and rng.random() < policy.identity_probability:
        kind = CorruptionKind.IDENTITY
    else:
        kind = policy.kinds[rng.integers(len(policy.kinds))]
    severity = int(policy.severities[rng.integers(len(policy.severities))])
    seed = int(rng.integers(0, 2**63, dtype=np.int64))
    return CorruptionSpec(kind, severity, seed)


def make_variant_set(
    clean: ImageSample,
    policy: AugmentationPolicy,
    base_seed: int,
    count: int = 3,
) -> VariantSet:
    """Build the variant family {S, v1, ..., v_{count-1}} of a clean image.

    Each slot gets an independently sampled spec derived from
    stable_hash(base_seed, slot), so the family is reproducible regardless
    of batching or worker layout.
    """
    if count < 2:
        raise ValueError(f"count must be >= 2, got {count}")
    specs = tuple(
        sample_spec(policy, stable_hash(base_seed, "variant", slot))
        for slot in range(count)
    )
    variants = tuple(apply_corruption(clean, spec) for spec in specs)
    return VariantSet(clean, variants, specs)
