"""Regression and classification metrics over probability predictions."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    mae: float
    mape_percent: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)


def confusion(probs, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) with ``prob >= threshold`` counted as positive."""
    pred = np.asarray(probs) >= threshold
    y = np.asarray(labels) > 0.5
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    return tp, fp, fn, tn


def classification_from_counts(tp: int, fp: int, fn: int, tn: int) -> dict:
    total = tp + fp + fn + tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "accuracy": (tp + tn) / total if total else 0.0,
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }


def compute_metrics(probs, labels, threshold: float = 0.5) -> MetricReport:
    """All seven metrics for one prediction vector.

    MAPE divides by ``max(|y|, 1)`` so binary targets never divide by zero.
    """
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise DimensionError(f"{len(p)} predictions vs {len(y)} labels")
    if len(p) == 0:
        raise ContractError("cannot compute metrics on an empty partition")
    err = p - y
    cls = classification_from_counts(*confusion(p, y, threshold))
    return MetricReport(
        rmse=float(np.sqrt(np.mean(err**2))),
        mae=float(np.mean(np.abs(err))),
        mape_percent=float(100.0 * np.mean(np.abs(err) / np.maximum(np.abs(y), 1.0))),
        threshold=float(threshold),
        **cls,
    )
