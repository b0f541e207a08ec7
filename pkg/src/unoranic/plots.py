"""Matplotlib figure rendering for the experiment reports (SVG output)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import PSNRReport, RevisionReport, RobustnessReport


def _finite(v: float, fallback: float = 50.0) -> float:
    return fallback if math.isinf(v) else v


def plot_reconstruction(reports: list[PSNRReport], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = [r.model_kind for r in reports]
    means = [_finite(r.mean) for r in reports]
    ax.bar(names, means, color=["tab:blue", "tab:orange"][: len(names)])
    for i, v in enumerate(means):
        ax.text(i, v, f"{v:.2f}", ha="center", va="bottom", fontsize=9)
    ax.set_ylabel("mean PSNR (dB)")
    ax.set_title(f"Reconstruction quality: {reports[0].dataset}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_revision(report: RevisionReport, path) -> None:
    entries = report.entries
    x = np.arange(len(entries))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(entries)), 4))
    ax.bar(
        x - width / 2,
        [_finite(e.psnr_corrupted) for e in entries],
        width,
        label="corrupted input",
        color="tab:red",
    )
    ax.bar(
        x + width / 2,
        [_finite(e.psnr_revised) for e in entries],
        width,
        label="anatomy reconstruction",
        color="tab:blue",
    )
    ax.axhline(
        _finite(report.psnr_clean_reference),
        linestyle="--",
        color="tab:green",
        label="clean-input reference",
    )
    ax.set_xticks(x)
    ax.set_xticklabels([e.kind for e in entries], rotation=45, ha="right")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(f"Corruption revision: {report.dataset}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_robustness(report: RobustnessReport, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    severities = report.severities
    for model, kinds in sorted(report.grid.items()):
        mean_curve = [
            float(np.mean([kinds[k][s] for k in report.kinds])) for s in severities
        ]
        line = ax.plot(
            [0] + severities,
            [report.clean_auc[model]] + mean_curve,
            marker="o",
            label=f"{model} (mean over corruptions)",
        )[0]
        for k in report.kinds:
            ax.plot(
                severities,
                [kinds[k][s] for s in severities],
                alpha=0.2,
                linewidth=0.8,
                color=line.get_color(),
            )
    ax.set_xlabel("corruption severity (0 = clean)")
    ax.set_ylabel("AUC")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"Corruption robustness: {report.dataset}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
