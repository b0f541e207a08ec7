"""Dataset loading, synthetic dataset generation and batch serving.

Images are float32 arrays of shape [C, H, W] with values in [0, 1].
Containers are zip-of-npy archives keyed ``{split}_images`` /
``{split}_labels`` (the MedMNIST ``.npz`` layout).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .container import ContainerFormatError, read_arrays, write_arrays

SPLITS = ("train", "val", "test")
TASKS = ("multiclass", "binary", "ordinal")

SHAPE_KINDS = ("disk", "cross", "ring")


class IntegrityError(Exception):
    """Container content is internally inconsistent."""


def stable_hash(*parts) -> int:
    """Deterministic 64-bit hash of a mixed tuple of ints/strings.

    Used everywhere a sub-seed is derived, so determinism never depends on
    Python's randomized ``hash`` or on worker scheduling.
    """
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # [C, H, W] float32 in [0, 1]
    label: Optional[int] = None

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise ValueError(f"pixels must be [C, H, W], got shape {self.pixels.shape}")


@dataclass
class Dataset:
    name: str
    split: str
    images: np.ndarray  # [n, C, H, W] float32
    labels: Optional[np.ndarray]  # [n] int64 or None
    class_count: int
    task: str = "multiclass"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise IntegrityError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> ImageSample:
        label = int(self.labels[i]) if self.labels is not None else None
        return ImageSample(self.images[i], label)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass
class Batch:
    indices: np.ndarray  # [b] dataset indices
    images: np.ndarray  # [b, C, H, W]
    labels: Optional[np.ndarray]

    def __len__(self) -> int:
        return len(self.indices)


def _to_chw(raw: np.ndarray) -> np.ndarray:
    """uint8 [n, H, W] or [n, H, W, 3] -> float32 [n, C, H, W] in [0, 1]."""
    if raw.ndim == 3:
        raw = raw[:, None, :, :]
    elif raw.ndim == 4 and raw.shape[-1] in (1, 3):
        raw = np.transpose(raw, (0, 3, 1, 2))
    else:
        raise ContainerFormatError(f"unsupported image array shape {raw.shape}")
    return raw.astype(np.float32) / 255.0


def load_container(path, split: str) -> Dataset:
    """Load one split from a zip-of-npy container."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    arrays, meta = read_arrays(path)
    for key in (f"{split}_images", f"{split}_labels"):
        if key not in arrays:
            raise ContainerFormatError(f"{path}: missing required key {key!r}")
    images = _to_chw(arrays[f"{split}_images"])
    labels = np.asarray(arrays[f"{split}_labels"]).reshape(-1).astype(np.int64)
    if len(labels) != len(images):
        raise IntegrityError(
            f"{path}: {len(images)} images but {len(labels)} labels in split {split!r}"
        )
    meta = meta or {}
    class_count = int(meta.get("class_count", 0))
    if class_count <= 0:
        # MedMNIST npz files carry no metadata; infer from all label arrays.
        label_keys = [k for k in arrays if k.endswith("_labels")]
        class_count = int(max(int(arrays[k].max()) for k in label_keys)) + 1
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise IntegrityError(f"{path}: label outside [0, {class_count})")
    task = meta.get("task", "binary" if class_count == 2 else "multiclass")
    name = meta.get("name", str(path))
    return Dataset(name, split, images, labels, class_count, task)


def write_container(path, datasets: Sequence[Dataset], meta: dict | None = None) -> None:
    """Write splits to a container; pixels are quantized back to uint8."""
    arrays: dict[str, np.ndarray] = {}
    base = datasets[0]
    for ds in datasets:
        raw = np.round(ds.images * 255.0).astype(np.uint8)
        if raw.shape[1] == 1:
            raw = raw[:, 0, :, :]
        else:
            raw = np.transpose(raw, (0, 2, 3, 1))
        arrays[f"{ds.split}_images"] = raw
        labels = ds.labels if ds.labels is not None else np.zeros(len(ds), np.int64)
        arrays[f"{ds.split}_labels"] = labels.astype(np.uint8)
    full_meta = {"name": base.name, "class_count": base.class_count, "task": base.task}
    if meta:
        full_meta.update(meta)
    write_arrays(path, arrays, full_meta)


@dataclass
class SyntheticSpec:
    """Recipe for a deterministic shape-classification dataset.

    Geometry (shape kind, position, size) depends only on a per-sample
    structural seed; intensities and the background gradient come from a
    separate appearance seed, so the same structure can appear under many
    appearances.
    """

    train_count: int = 1000
    val_count: int = 200
    test_count: int = 200
    image_side: int = 28
    class_count: int = 3
    foreground_range: tuple[float, float] = (0.65, 0.95)
    background_range: tuple[float, float] = (0.05, 0.30)
    seed: int = 0
    name: str = "synthetic-shapes"

    def __post_init__(self):
        if self.image_side < 8:
            raise ValueError(f"image_side must be >= 8, got {self.image_side}")
        if not 2 <= self.class_count <= len(SHAPE_KINDS):
            raise ValueError(
                f"class_count must be in [2, {len(SHAPE_KINDS)}], got {self.class_count}"
            )
        for count in (self.train_count, self.val_count, self.test_count):
            if count < self.class_count:
                raise ValueError("each split needs at least class_count samples")


def _shape_mask(kind: str, side: int, rng: np.random.Generator) -> np.ndarray:
    """Anti-aliased [H, W] mask in [0, 1] with a ~1 px soft edge."""
    cy = rng.uniform(0.35, 0.65) * side
    cx = rng.uniform(0.35, 0.65) * side
    r = rng.uniform(0.18, 0.30) * side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    dist = np.hypot(dy, dx)
    if kind == "disk":
        sdf = dist - r
    elif kind == "ring":
        width = max(1.5, 0.35 * r)
        sdf = np.abs(dist - r) - width / 2
    elif kind == "cross":
        arm = max(1.5, 0.30 * r)
        bar_h = np.maximum(np.abs(dy) - arm / 2, np.abs(dx) - r)
        bar_v = np.maximum(np.abs(dx) - arm / 2, np.abs(dy) - r)
        sdf = np.minimum(bar_h, bar_v)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return np.clip(0.5 - sdf, 0.0, 1.0)


def render_sample(
    spec: SyntheticSpec, kind: str, structural_seed: int, appearance_seed: int
) -> np.ndarray:
    """Render one [1, H, W] image; geometry is a function of structural_seed only."""
    side = spec.image_side
    geo_rng = np.random.Generator(np.random.PCG64(structural_seed))
    mask = _shape_mask(kind, side, geo_rng)

    app_rng = np.random.Generator(np.random.PCG64(appearance_seed))
    fg = app_rng.uniform(*spec.foreground_range)
    bg = app_rng.uniform(*spec.background_range)
    # mild smooth background gradient, kept inside the background range
    angle = app_rng.uniform(0, 2 * np.pi)
    slope = app_rng.uniform(0.0, 0.08)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / side
    grad = slope * ((yy - 0.5) * np.sin(angle) + (xx - 0.5) * np.cos(angle))
    background = np.clip(bg + grad, 0.0, spec.background_range[1] + 0.1)
    img = background * (1 - mask) + fg * mask
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


def generate_synthetic(spec: SyntheticSpec) -> dict[str, Dataset]:
    """Generate {train, val, test} datasets; bit-identical for equal specs."""
    counts = {"train": spec.train_count, "val": spec.val_count, "test": spec.test_count}
    out: dict[str, Dataset] = {}
    for split, count in counts.items():
        images = np.empty((count, 1, spec.image_side, spec.image_side), np.float32)
        labels = np.empty(count, np.int64)
        for i in range(count):
            # round-robin guarantees every class is present in every split
            label = i % spec.class_count
            kind = SHAPE_KINDS[label]
            s_seed = stable_hash(spec.seed, "geom", split, i)
            a_seed = stable_hash(spec.seed, "app", split, i)
            images[i] = render_sample(spec, kind, s_seed, a_seed)
            labels[i] = label
        out[split] = Dataset(spec.name, split, images, labels, spec.class_count)
    return out


def batches(
    dataset: Dataset, batch_size: int, shuffle_seed: Optional[int] = None
) -> Iterator[Batch]:
    """Yield batches covering every index exactly once; short tail kept.

    With a seed the permutation is deterministic; without one, dataset order.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(dataset) == 0:
        raise ValueError("cannot batch an empty dataset")
    order = np.arange(len(dataset))
    if shuffle_seed is not None:
        rng = np.random.Generator(np.random.PCG64(shuffle_seed))
        order = rng.permutation(order)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        labels = dataset.labels[idx] if dataset.labels is not None else None
        yield Batch(idx, dataset.images[idx], labels)
