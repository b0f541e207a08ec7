"""JSON and CSV serialization for experiment reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .evaluate import (
    ProbeResult,
    PSNRReport,
    RevisionReport,
    RobustnessReport,
    _jsonable,
)


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def write_psnr_csv(path, reports: list[PSNRReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "model_kind", "mean_psnr_db", "inf_count", "n_samples"])
        for r in reports:
            writer.writerow(
                [r.dataset, r.model_kind, _jsonable(r.mean), r.inf_count, len(r.per_sample)]
            )


def write_probe_csv(path, results: list[ProbeResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "embedding_source", "auc", "acc", "class_count"])
        for r in results:
            writer.writerow([r.task, r.embedding_source, r.auc, r.acc, r.class_count])


def write_revision_csv(path, report: RevisionReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "kind",
                "severity",
                "psnr_corrupted_db",
                "psnr_revised_db",
                "psnr_clean_reference_db",
            ]
        )
        for e in report.entries:
            writer.writerow(
                [
                    e.kind,
                    e.severity,
                    _jsonable(e.psnr_corrupted),
                    _jsonable(e.psnr_revised),
                    _jsonable(report.psnr_clean_reference),
                ]
            )


def write_robustness_csv(path, report: RobustnessReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_kind", "corruption", "severity", "auc"])
        for model, kinds in sorted(report.grid.items()):
            writer.writerow([model, "clean", 0, report.clean_auc[model]])
            for kind, cells in kinds.items():
                for severity, auc in sorted(cells.items()):
                    writer.writerow([model, kind, severity, auc])
