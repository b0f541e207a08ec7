"""Training loop for the dual-branch model and the vanilla-AE baseline.

Gradient routing follows from the loss graph itself: the anatomy decoder
only appears in the clean-image reconstruction term, the characteristic
encoder and joint decoder only in the synthetic reconstruction term, and
the anatomy encoder in all three, so a single backward pass on the
weighted total routes gradients correctly.

All randomness (shuffling, per-sample corruption seeds, validation
corruption seeds) is derived statelessly from the master seed via
`stable_hash`, so runs are reproducible and resuming from a checkpoint at
an epoch boundary reproduces the uninterrupted run bit-exactly.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import model as model_mod
from .container import ContainerFormatError, read_arrays, write_arrays
from .corruptions import AugmentationPolicy, CorruptionKind, make_variant_set
from .data import Batch, Dataset, ImageSample, batches, stable_hash
from .losses import (
    LossBreakdown,
    LossWeights,
    breakdown,
    consistency_loss,
    reconstruction_loss,
    total_loss,
)
from .model import ArchConfig, ModelBundle, init_model

CHECKPOINT_FORMAT = "unoranic-checkpoint/1"
MODEL_KINDS = ("unoranic", "vanilla_ae")
LRI_INPUTS = ("synthetic", "clean")


class TrainingDiverged(RuntimeError):
    """Raised when a loss becomes non-finite."""


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 150
    patience: int = 10
    lr_base: float = 1e-4
    lr_max: float = 1e-3
    lr_cycle_steps: int = 2000
    weights: LossWeights = field(default_factory=LossWeights)
    variant_count: int = 3
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    recon_norm: str = "l2norm"
    lri_input: str = "synthetic"
    seed: int = 0
    model_kind: str = "unoranic"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr_base > self.lr_max:
            raise ValueError("lr_base must be <= lr_max")
        if self.variant_count < 2:
            raise ValueError("variant_count must be >= 2")
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model_kind {self.model_kind!r}")
        if self.lri_input not in LRI_INPUTS:
            raise ValueError(f"unknown lri_input {self.lri_input!r}")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "lr_base": self.lr_base,
            "lr_max": self.lr_max,
            "lr_cycle_steps": self.lr_cycle_steps,
            "lambda_reconstruction": self.weights.reconstruction,
            "lambda_consistency": self.weights.consistency,
            "variant_count": self.variant_count,
            "policy_kinds": [k.value for k in self.policy.kinds],
            "policy_severities": list(self.policy.severities),
            "policy_identity_probability": self.policy.identity_probability,
            "recon_norm": self.recon_norm,
            "lri_input": self.lri_input,
            "seed": self.seed,
            "model_kind": self.model_kind,
            "adam_betas": list(self.adam_betas),
            "adam_eps": self.adam_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            batch_size=d["batch_size"],
            max_epochs=d["max_epochs"],
            patience=d["patience"],
            lr_base=d["lr_base"],
            lr_max=d["lr_max"],
            lr_cycle_steps=d["lr_cycle_steps"],
            weights=LossWeights(d["lambda_reconstruction"], d["lambda_consistency"]),
            variant_count=d["variant_count"],
            policy=AugmentationPolicy(
                kinds=tuple(CorruptionKind(k) for k in d["policy_kinds"]),
                severities=tuple(d["policy_severities"]),
                identity_probability=d["policy_identity_probability"],
            ),
            recon_norm=d["recon_norm"],
            lri_input=d["lri_input"],
            seed=d["seed"],
            model_kind=d["model_kind"],
            adam_betas=tuple(d["adam_betas"]),
            adam_eps=d["adam_eps"],
        )


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    lr: float
    train: LossBreakdown
    val: Optional[LossBreakdown]
    wall_seconds: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "step": self.step,
                "lr": self.lr,
                "train": self.train.to_dict(),
                "val": self.val.to_dict() if self.val else None,
                "wall_seconds": self.wall_seconds,
            },
            sort_keys=True,
        )


def cyclic_lr(step: int, lr_base: float, lr_max: float, cycle_steps: int) -> float:
    """Triangular schedule: base -> max over half a cycle, back down, repeat."""
    if cycle_steps < 2:
        raise ValueError("cycle_steps must be >= 2")
    pos = step % cycle_steps
    half = cycle_steps / 2
    frac = pos / half if pos <= half else (cycle_steps - pos) / half
    return lr_base + (lr_max - lr_base) * frac


def trainable_parameters(bundle: ModelBundle, model_kind: str) -> list[torch.nn.Parameter]:
    if model_kind == "vanilla_ae":
        return list(bundle.anatomy_parameters())
    return list(bundle.parameters())


def make_optimizer(bundle: ModelBundle, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        trainable_parameters(bundle, config.model_kind),
        lr=config.lr_base,
        betas=config.adam_betas,
        eps=config.adam_eps,
    )


def _variant_batches(
    batch: Batch, config: TrainConfig, epoch: int
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Corrupt each clean image into `variant_count` variants.

    Returns (clean [b,C,H,W], [variant_batches]); sub-seeds depend only on
    (master seed, epoch, dataset index), never on batch composition.
    """
    variant_stacks: list[list[np.ndarray]] = [[] for _ in range(config.variant_count)]
    for ds_index, pixels in zip(batch.indices, batch.images):
        vs = make_variant_set(
            ImageSample(pixels),
            config.policy,
            stable_hash(config.seed, "aug", epoch, int(ds_index)),
            count=config.variant_count,
        )
        for slot, var in enumerate(vs.variants):
            variant_stacks[slot].append(var.pixels)
    return batch.images, [np.stack(s) for s in variant_stacks]


def _loss_graph(
    bundle: ModelBundle,
    clean: np.ndarray,
    variants: list[np.ndarray],
    config: TrainConfig,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Forward passes and the weighted total for one dual-branch step."""
    synthetic = variants[0]
    anatomy_embs = [model_mod.encode_anatomy(bundle, v) for v in variants]

    s_tensor = model_mod._as_image_tensor(bundle, synthetic)
    clean_tensor = model_mod._as_image_tensor(bundle, clean)

    l_c = consistency_loss(anatomy_embs)

    char_emb = model_mod.encode_characteristic(bundle, synthetic)
    s_hat = model_mod.decode_joint(bundle, anatomy_embs[0], char_emb)
    l_rs = reconstruction_loss(s_tensor, s_hat, config.recon_norm)

    if config.lri_input == "synthetic":
        anatomy_recon = model_mod.decode_anatomy(bundle, anatomy_embs[0])
    else:
        anatomy_recon = model_mod.decode_anatomy(
            bundle, model_mod.encode_anatomy(bundle, clean)
        )
    l_ri = reconstruction_loss(clean_tensor, anatomy_recon, config.recon_norm)

    total = total_loss(l_c, l_rs, l_ri, config.weights)
    if not torch.isfinite(total):
        raise TrainingDiverged(
            f"non-finite loss: consistency={float(l_c)}, "
            f"recon_synthetic={float(l_rs)}, recon_anatomy={float(l_ri)}"
        )
    return total, breakdown(l_c, l_rs, l_ri, config.weights)


def _vanilla_loss_graph(
    bundle: ModelBundle, clean: np.ndarray, config: TrainConfig
) -> tuple[torch.Tensor, LossBreakdown]:
    clean_tensor = model_mod._as_image_tensor(bundle, clean)
    recon = model_mod.decode_anatomy(bundle, model_mod.encode_anatomy(bundle, clean))
    l_ri = reconstruction_loss(clean_tensor, recon, config.recon_norm)
    total = config.weights.reconstruction * l_ri
    if not torch.isfinite(total):
        raise TrainingDiverged(f"non-finite loss: recon_anatomy={float(l_ri)}")
    zero = torch.zeros((), dtype=total.dtype)
    return total, breakdown(zero, zero, l_ri, config.weights)


def train_step(
    bundle: ModelBundle,
    batch: Batch,
    config: TrainConfig,
    optimizer: torch.optim.Adam,
    global_step: int = 0,
    epoch: int = 0,
) -> LossBreakdown:
    """One optimization step; returns the scalar loss breakdown."""
    lr = cyclic_lr(global_step, config.lr_base, config.lr_max, config.lr_cycle_steps)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=False)
    if config.model_kind == "vanilla_ae":
        total, parts = _vanilla_loss_graph(bundle, batch.images, config)
    else:
        clean, variants = _variant_batches(batch, config, epoch)
        total, parts = _loss_graph(bundle, clean, variants, config)
    total.backward()
    optimizer.step()
    return parts


def validation_loss(
    bundle: ModelBundle, val_ds: Dataset, config: TrainConfig
) -> LossBreakdown:
    """Loss breakdown on the validation set with a fixed corruption seed
    stream (epoch-independent, so values are comparable across epochs)."""
    bundle.eval_mode()
    sums = np.zeros(3)
    n_batches = 0
    with torch.no_grad():
        for batch in batches(val_ds, config.batch_size):
            if config.model_kind == "vanilla_ae":
                _, parts = _vanilla_loss_graph(bundle, batch.images, config)
            else:
                clean, variants = _variant_batches(batch, config, epoch=-1)
                _, parts = _loss_graph(bundle, clean, variants, config)
            sums += [parts.consistency, parts.recon_synthetic, parts.recon_anatomy]
            n_batches += 1
    bundle.train_mode()
    mean = sums / n_batches
    return breakdown(mean[0], mean[1], mean[2], config.weights)


@dataclass
class Checkpoint:
    format: str
    arch: ArchConfig
    config: TrainConfig
    epoch: int
    global_step: int
    model_state: dict[str, np.ndarray]
    optim_state: dict[str, np.ndarray]

    def build_bundle(self) -> ModelBundle:
        bundle = init_model(self.arch, seed=0)
        if self.config.model_kind == "vanilla_ae":
            modules = {
                "encoder_anatomy": bundle.encoder_anatomy,
                "decoder_anatomy": bundle.decoder_anatomy,
            }
        else:
            modules = bundle.modules()
        for name, module in modules.items():
            state = {
                k[len(name) + 1 :]: torch.as_tensor(v)
                for k, v in self.model_state.items()
                if k.startswith(name + "/")
            }
            module.load_state_dict({k: v for k, v in state.items()})
        return bundle


def snapshot_checkpoint(
    bundle: ModelBundle,
    optimizer: torch.optim.Adam,
    config: TrainConfig,
    epoch: int,
    global_step: int,
) -> Checkpoint:
    if config.model_kind == "vanilla_ae":
        module_names = ("encoder_anatomy", "decoder_anatomy")
    else:
        module_names = tuple(bundle.modules())
    model_state: dict[str, np.ndarray] = {}
    for name in module_names:
        for key, tensor in bundle.modules()[name].state_dict().items():
            model_state[f"{name}/{key}"] = tensor.detach().cpu().numpy().copy()
    optim_state: dict[str, np.ndarray] = {}
    for i, param in enumerate(optimizer.param_groups[0]["params"]):
        state = optimizer.state.get(param, {})
        if state:
            optim_state[f"{i}/exp_avg"] = state["exp_avg"].cpu().numpy().copy()
            optim_state[f"{i}/exp_avg_sq"] = state["exp_avg_sq"].cpu().numpy().copy()
            optim_state[f"{i}/step"] = np.asarray(float(state["step"]))
    return Checkpoint(
        CHECKPOINT_FORMAT, bundle.arch, config, epoch, global_step, model_state, optim_state
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = {f"model/{k}": v for k, v in ckpt.model_state.items()}
    arrays.update({f"optim/{k}": v for k, v in ckpt.optim_state.items()})
    meta = {
        "format": ckpt.format,
        "arch": ckpt.arch.to_dict(),
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "global_step": ckpt.global_step,
    }
    write_arrays(path, arrays, meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = read_arrays(path)
    if meta is None or "format" not in meta:
        raise ContainerFormatError(f"{path}: not a checkpoint (no format tag)")
    if meta["format"] != CHECKPOINT_FORMAT:
        raise ContainerFormatError(
            f"{path}: unsupported checkpoint format {meta['format']!r}, "
            f"expected {CHECKPOINT_FORMAT!r}"
        )
    model_state = {
        k[len("model/") :]: v for k, v in arrays.items() if k.startswith("model/")
    }
    optim_state = {
        k[len("optim/") :]: v for k, v in arrays.items() if k.startswith("optim/")
    }
    return Checkpoint(
        meta["format"],
        ArchConfig(**meta["arch"]),
        TrainConfig.from_dict(meta["config"]),
        meta["epoch"],
        meta["global_step"],
        model_state,
        optim_state,
    )


def restore_optimizer(
    optimizer: torch.optim.Adam, ckpt: Checkpoint
) -> None:
    params = optimizer.param_groups[0]["params"]
    for i, param in enumerate(params):
        key = f"{i}/exp_avg"
        if key in ckpt.optim_state:
            optimizer.state[param] = {
                "step": torch.tensor(float(np.ravel(ckpt.optim_state[f"{i}/step"])[0])),
                "exp_avg": torch.as_tensor(ckpt.optim_state[f"{i}/exp_avg"]).clone(),
                "exp_avg_sq": torch.as_tensor(ckpt.optim_state[f"{i}/exp_avg_sq"]).clone(),
            }


def fit(
    config: TrainConfig,
    train_ds: Dataset,
    val_ds: Dataset,
    arch: Optional[ArchConfig] = None,
    log_path=None,
    checkpoint_path=None,
    resume_from: Optional[Checkpoint] = None,
) -> tuple[ModelBundle, list[TrainLogRecord]]:
    """Train until max_epochs or early stop; returns the best-validation
    bundle (eval mode) and per-epoch log records.

    ``checkpoint_path``, when given, always holds the latest epoch's full
    optimizer state (suitable for resuming); the best-validation model is
    what gets returned.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("datasets must be non-empty")
    if arch is None:
        c, h, w = train_ds.image_shape
        arch = ArchConfig(input_channels=c, input_side=h)

    torch.manual_seed(config.seed)
    if resume_from is not None:
        bundle = resume_from.build_bundle()
        start_epoch = resume_from.epoch + 1
        global_step = resume_from.global_step
    else:
        bundle = init_model(arch, stable_hash(config.seed, "init"))
        start_epoch = 0
        global_step = 0
    bundle.train_mode()
    optimizer = make_optimizer(bundle, config)
    if resume_from is not None:
        restore_optimizer(optimizer, resume_from)

    logs: list[TrainLogRecord] = []
    best_val = np.inf
    best_state: Optional[dict] = None
    since_best = 0
    log_file = open(log_path, "a") if log_path else None
    start_time = time.monotonic()
    try:
        for epoch in range(start_epoch, config.max_epochs):
            train_sums = np.zeros(3)
            n_batches = 0
            lr = config.lr_base
            for batch in batches(
                train_ds, config.batch_size, stable_hash(config.seed, "shuffle", epoch)
            ):
                lr = cyclic_lr(
                    global_step, config.lr_base, config.lr_max, config.lr_cycle_steps
                )
                parts = train_step(bundle, batch, config, optimizer, global_step, epoch)
                train_sums += [parts.consistency, parts.recon_synthetic, parts.recon_anatomy]
                n_batches += 1
                global_step += 1
            mean = train_sums / n_batches
            train_parts = breakdown(mean[0], mean[1], mean[2], config.weights)
            val_parts = validation_loss(bundle, val_ds, config)
            record = TrainLogRecord(
                epoch, global_step, lr, train_parts, val_parts,
                time.monotonic() - start_time,
            )
            logs.append(record)
            if log_file:
                log_file.write(record.to_json() + "\n")
                log_file.flush()
            if checkpoint_path:
                save_checkpoint(
                    checkpoint_path,
                    snapshot_checkpoint(bundle, optimizer, config, epoch, global_step),
                )
            if val_parts.total < best_val:
                best_val = val_parts.total
                best_state = copy.deepcopy(
                    {n: m.state_dict() for n, m in bundle.modules().items()}
                )
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    break
    finally:
        if log_file:
            log_file.close()

    if best_state is not None:
        for name, module in bundle.modules().items():
            module.load_state_dict(best_state[name])
    bundle.eval_mode()
    return bundle, logs


def fit_vanilla_ae(
    config: TrainConfig, train_ds: Dataset, val_ds: Dataset, **kwargs
) -> tuple[ModelBundle, list[TrainLogRecord]]:
    """Train the anatomy branch alone as a plain autoencoder on clean images."""
    if config.model_kind != "vanilla_ae":
        config = dataclasses.replace(config, model_kind="vanilla_ae")
    return fit(config, train_ds, val_ds, **kwargs)
