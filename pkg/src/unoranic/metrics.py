"""PSNR, ROC AUC and accuracy."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given inputs (e.g. single-class AUC)."""


def psnr(reference: np.ndarray, candidate: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB; +inf when the images are identical."""
    reference = np.asarray(reference, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if reference.shape != candidate.shape:
        raise ValueError(
            f"shape mismatch: {reference.shape} vs {candidate.shape}"
        )
    mse = np.mean((reference - candidate) ** 2)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def mean_psnr(values) -> tuple[float, int]:
    """Mean with +inf sentinels excluded; returns (mean, inf_count).

    If every value is +inf the mean itself is +inf.
    """
    values = list(values)
    finite = [v for v in values if math.isfinite(v)]
    inf_count = len(values) - len(finite)
    if not finite:
        return math.inf, inf_count
    return float(np.mean(finite)), inf_count


def roc_auc(scores, labels) -> float:
    """Binary AUC as the Mann-Whitney statistic, ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(scores)  # average ranks handle ties exactly
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_auc_multiclass(score_matrix, labels) -> float:
    """Unweighted one-vs-rest macro average over classes with both
    positives and negatives present."""
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(labels)
    if score_matrix.ndim != 2 or len(score_matrix) != len(labels):
        raise ValueError("score_matrix must be [n, class_count] aligned with labels")
    if score_matrix.shape[1] == 2:
        return roc_auc(score_matrix[:, 1], (labels == 1).astype(int))
    per_class = []
    for c in range(score_matrix.shape[1]):
        binary = (labels == c).astype(int)
        if 0 < binary.sum() < len(binary):
            per_class.append(roc_auc(score_matrix[:, c], binary))
    if not per_class:
        raise UndefinedMetricError("no class has both positives and negatives")
    return float(np.mean(per_class))


def accuracy(predicted, true) -> float:
    predicted = np.asarray(predicted)
    true = np.asarray(true)
    if predicted.shape != true.shape:
        raise ValueError("length mismatch")
    if predicted.size == 0:
        raise ValueError("accuracy of empty inputs is undefined")
    return float((predicted == true).mean())
