"""Command-line entry point: dataset generation, training, experiments.

Exit codes: 0 success, 2 usage/config error, 3 training failure,
4 artifact mismatch.
"""

from __future__ import annotations

import datetime
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import evaluate, plots, reports
from .corruptions import EVAL_KINDS, AugmentationPolicy, CorruptionKind
from .data import (
    Dataset,
    SyntheticSpec,
    generate_synthetic,
    load_container,
    write_container,
)
from .manifest import write_manifest
from .model import ArchConfig
from .train import (
    Checkpoint,
    CHECKPOINT_FORMAT,
    TrainConfig,
    TrainingDiverged,
    fit,
    load_checkpoint,
    save_checkpoint,
    snapshot_checkpoint,
)

EXIT_USAGE = 2
EXIT_TRAINING = 3
EXIT_MISMATCH = 4

_SPEC_KEYS = {
    "train_count",
    "val_count",
    "test_count",
    "image_side",
    "class_count",
    "foreground_range",
    "background_range",
    "seed",
    "name",
}
_ARCH_KEYS = {"block_count", "base_channels", "latent_dim", "leaky_slope"}
_CONFIG_KEYS = set(TrainConfig().to_dict()) | {"arch"}


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_json(path: Path, allowed: set[str], what: str) -> dict:
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        _fail(EXIT_USAGE, f"cannot read {what} {path}: {exc}")
    unknown = set(payload) - allowed
    if unknown:
        _fail(EXIT_USAGE, f"{what} {path}: unknown keys {sorted(unknown)}")
    return payload


def _load_run_config(path: Path) -> tuple[TrainConfig, dict]:
    payload = _load_json(path, _CONFIG_KEYS, "config")
    arch_overrides = payload.pop("arch", {})
    unknown = set(arch_overrides) - _ARCH_KEYS
    if unknown:
        _fail(EXIT_USAGE, f"config {path}: unknown arch keys {sorted(unknown)}")
    defaults = TrainConfig().to_dict()
    defaults.update(payload)
    if "UNORANIC_SEED" in os.environ:
        defaults["seed"] = int(os.environ["UNORANIC_SEED"])
    try:
        config = TrainConfig.from_dict(defaults)
    except (ValueError, KeyError) as exc:
        _fail(EXIT_USAGE, f"config {path}: {exc}")
    return config, arch_overrides


def _load_splits(data_path: Path) -> dict[str, Dataset]:
    try:
        return {s: load_container(data_path, s) for s in ("train", "val", "test")}
    except Exception as exc:
        _fail(EXIT_USAGE, f"cannot load dataset {data_path}: {exc}")


@click.group()
def main():
    """Dual-branch corruption-robust autoencoder toolkit."""


@main.command("synth")
@click.option("--spec", "spec_path", required=True, type=click.Path(path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
def cmd_synth(spec_path: Path, out_dir: Path):
    """Generate a deterministic synthetic dataset container."""
    started = datetime.datetime.now(datetime.timezone.utc)
    if not spec_path.exists():
        _fail(EXIT_USAGE, f"spec file not found: {spec_path}")
    payload = _load_json(spec_path, _SPEC_KEYS, "spec")
    try:
        spec = SyntheticSpec(**payload)
        out_dir.mkdir(parents=True, exist_ok=True)
        datasets = generate_synthetic(spec)
        container = out_dir / "dataset.zip"
        write_container(container, list(datasets.values()))
    except (ValueError, OSError) as exc:
        _fail(EXIT_USAGE, str(exc))
    write_manifest(
        out_dir,
        config=payload,
        seeds={"master": spec.seed},
        artifacts=[container],
        started=started,
    )
    click.echo(f"wrote {container}")


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path))
@click.option("--data", "data_path", required=True, type=click.Path(path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--model", "model_kind", type=click.Choice(["unoranic", "vanilla_ae"]), default=None)
def cmd_train(config_path: Path, data_path: Path, out_dir: Path, model_kind: str | None):
    """Train the dual-branch model or the vanilla-AE baseline."""
    started = datetime.datetime.now(datetime.timezone.utc)
    if not config_path.exists():
        _fail(EXIT_USAGE, f"config file not found: {config_path}")
    config, arch_overrides = _load_run_config(config_path)
    if model_kind:
        d = config.to_dict()
        d["model_kind"] = model_kind
        config = TrainConfig.from_dict(d)
    splits = _load_splits(data_path)
    c, h, _ = splits["train"].image_shape
    arch = ArchConfig(input_channels=c, input_side=h, **arch_overrides)

    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    last_path = out_dir / "last.ckpt"
    best_path = out_dir / "checkpoint.ckpt"
    try:
        bundle, logs = fit(
            config,
            splits["train"],
            splits["val"],
            arch=arch,
            log_path=log_path,
            checkpoint_path=last_path,
        )
    except TrainingDiverged as exc:
        _fail(EXIT_TRAINING, f"training diverged: {exc} (last checkpoint: {last_path})")
    best_epoch = min(logs, key=lambda r: r.val.total).epoch if logs else 0
    ckpt = Checkpoint(
        CHECKPOINT_FORMAT,
        arch,
        config,
        best_epoch,
        logs[-1].step if logs else 0,
        snapshot_checkpoint(bundle, _empty_optimizer(bundle, config), config, best_epoch, 0).model_state,
        {},
    )
    save_checkpoint(best_path, ckpt)
    # persist the fully-materialized config for provenance
    config_out = out_dir / "config.json"
    full = config.to_dict()
    full["arch"] = arch.to_dict()
    config_out.write_text(json.dumps(full, sort_keys=True, indent=2) + "\n")
    write_manifest(
        out_dir,
        config=full,
        seeds={"master": config.seed},
        artifacts=[best_path, last_path, log_path, config_out],
        started=started,
    )
    click.echo(f"wrote {best_path} (best epoch {best_epoch})")


def _empty_optimizer(bundle, config):
    from .train import make_optimizer

    return make_optimizer(bundle, config)


def _check_arch(ckpt: Checkpoint, dataset: Dataset):
    c, h, w = dataset.image_shape
    if ckpt.arch.input_channels != c or ckpt.arch.input_side != h:
        _fail(
            EXIT_MISMATCH,
            f"checkpoint architecture ({ckpt.arch.input_channels}, "
            f"{ckpt.arch.input_side}) does not match dataset images ({c}, {h})",
        )


@main.command("eval")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(path_type=Path))
@click.option("--data", "data_path", required=True, type=click.Path(path_type=Path))
@click.option(
    "--experiment",
    required=True,
    type=click.Choice(["recon", "revise", "probe", "robust"]),
)
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option(
    "--baseline-checkpoint",
    "baseline_path",
    type=click.Path(path_type=Path),
    default=None,
    help="Optional second checkpoint (e.g. vanilla AE) for paired comparison.",
)
@click.option("--severity", default=3, show_default=True, type=click.IntRange(1, 5))
@click.option("--seed", default=None, type=int)
def cmd_eval(
    ckpt_path: Path,
    data_path: Path,
    experiment: str,
    out_dir: Path,
    baseline_path: Path | None,
    severity: int,
    seed: int | None,
):
    """Run one experiment and write its JSON/CSV report plus SVG figure."""
    started = datetime.datetime.now(datetime.timezone.utc)
    if not ckpt_path.exists():
        _fail(EXIT_USAGE, f"checkpoint not found: {ckpt_path}")
    if seed is None:
        seed = int(os.environ.get("UNORANIC_SEED", "0"))
    try:
        ckpt = load_checkpoint(ckpt_path)
    except Exception as exc:
        _fail(EXIT_USAGE, f"cannot load checkpoint {ckpt_path}: {exc}")
    splits = _load_splits(data_path)
    _check_arch(ckpt, splits["test"])
    bundle = ckpt.build_bundle().eval_mode()
    entries = [(ckpt.config.model_kind, bundle, ckpt)]
    if baseline_path is not None:
        base_ckpt = load_checkpoint(baseline_path)
        _check_arch(base_ckpt, splits["test"])
        entries.append(
            (base_ckpt.config.model_kind, base_ckpt.build_bundle().eval_mode(), base_ckpt)
        )

    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = _run_experiment(experiment, entries, splits, out_dir, seed, severity)
    write_manifest(
        out_dir,
        config={
            "experiment": experiment,
            "checkpoint": str(ckpt_path),
            "baseline_checkpoint": str(baseline_path) if baseline_path else None,
            "data": str(data_path),
            "severity": severity,
        },
        seeds={"eval": seed},
        artifacts=artifacts,
        started=started,
    )
    for a in artifacts:
        click.echo(f"wrote {a}")


def _run_experiment(experiment, entries, splits, out_dir: Path, seed, severity):
    test = splits["test"]
    if experiment == "recon":
        psnr_reports = [
            evaluate.reconstruction_experiment(bundle, test, kind)
            for kind, bundle, _ in entries
        ]
        reports.write_json(
            out_dir / "recon.json", {"reports": [r.to_dict() for r in psnr_reports]}
        )
        reports.write_psnr_csv(out_dir / "recon.csv", psnr_reports)
        plots.plot_reconstruction(psnr_reports, out_dir / "recon.svg")
        return [out_dir / "recon.json", out_dir / "recon.csv", out_dir / "recon.svg"]

    if experiment == "revise":
        _, bundle, _ = entries[0]
        report = evaluate.revision_experiment(
            bundle, test, EVAL_KINDS, seed=seed, severity=severity
        )
        reports.write_json(out_dir / "revise.json", report.to_dict())
        reports.write_revision_csv(out_dir / "revise.csv", report)
        plots.plot_revision(report, out_dir / "revise.svg")
        return [out_dir / "revise.json", out_dir / "revise.csv", out_dir / "revise.svg"]

    if experiment == "probe":
        results = []
        for kind, bundle, ckpt in entries:
            results.extend(_probe_suite(bundle, kind, splits, seed))
        reports.write_json(
            out_dir / "probe.json", {"results": [r.to_dict() for r in results]}
        )
        reports.write_probe_csv(out_dir / "probe.csv", results)
        return [out_dir / "probe.json", out_dir / "probe.csv"]

    # robust
    scorers = {}
    for kind, bundle, ckpt in entries:
        train_emb = evaluate.embed_dataset(bundle, splits["train"].images, "anatomy")
        test_emb = evaluate.embed_dataset(bundle, test.images, "anatomy")
        _, probe = evaluate.train_linear_probe(
            train_emb,
            splits["train"].labels,
            test_emb,
            test.labels,
            test.class_count,
            embedding_source="anatomy",
            config=evaluate.ProbeConfig(seed=seed),
        )
        scorers[kind] = evaluate.probe_scorer(bundle, probe, "anatomy")
    report = evaluate.robustness_sweep(scorers, test, EVAL_KINDS, seed=seed)
    reports.write_json(out_dir / "robust.json", report.to_dict())
    reports.write_robustness_csv(out_dir / "robust.csv", report)
    plots.plot_robustness(report, out_dir / "robust.svg")
    return [out_dir / "robust.json", out_dir / "robust.csv", out_dir / "robust.svg"]


def _probe_suite(bundle, model_kind, splits, seed):
    """Classification + corruption-detection probes for every embedding
    source the model provides."""
    train, test = splits["train"], splits["test"]
    sources = ["anatomy"] if model_kind == "vanilla_ae" else list(evaluate.EMBEDDING_SOURCES)
    results = []
    det_train_images, det_train_labels = evaluate.corruption_detection_dataset(
        train, seed=stable_seed(seed, "det-train")
    )
    det_test_images, det_test_labels = evaluate.corruption_detection_dataset(
        test, seed=stable_seed(seed, "det-test")
    )
    for source in sources:
        cfg = evaluate.ProbeConfig(seed=seed)
        r, _ = evaluate.train_linear_probe(
            evaluate.embed_dataset(bundle, train.images, source),
            train.labels,
            evaluate.embed_dataset(bundle, test.images, source),
            test.labels,
            test.class_count,
            task="classification",
            embedding_source=source,
            config=cfg,
        )
        results.append(r)
        r, _ = evaluate.train_linear_probe(
            evaluate.embed_dataset(bundle, det_train_images, source),
            det_train_labels,
            evaluate.embed_dataset(bundle, det_test_images, source),
            det_test_labels,
            2,
            task="corruption_detection",
            embedding_source=source,
            config=cfg,
        )
        results.append(r)
    return results


def stable_seed(seed, tag):
    from .data import stable_hash

    return stable_hash(seed, tag)


if __name__ == "__main__":
    main()
