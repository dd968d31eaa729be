"""Task metrics: imputation Pearson R^2 (x100), RMSE and accuracy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricReport:
    name: str
    value: float
    n: int
    per_position: np.ndarray | None = None
    excluded: int = 0

    @property
    def higher_is_better(self) -> bool:
        return self.name != "rmse"


def pearson_r2(pred, truth) -> MetricReport:
    """Per-site squared Pearson correlation across individuals, averaged over sites, x100.

    Sites where either the truth or the prediction has zero variance
    contribute 0 and are counted in ``excluded``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.shape[0] < 2:
        raise ValueError("Pearson R^2 needs at least 2 individuals")
    pc = pred - pred.mean(axis=0)
    tc = truth - truth.mean(axis=0)
    sp = np.sqrt((pc * pc).sum(axis=0))
    st = np.sqrt((tc * tc).sum(axis=0))
    degenerate = (sp == 0) | (st == 0)
    denom = np.where(degenerate, 1.0, sp * st)
    r = np.where(degenerate, 0.0, (pc * tc).sum(axis=0) / denom)
    per_site = np.clip(r * r, 0.0, 1.0) * 100.0
    return MetricReport("pearson_r2", float(per_site.mean()), pred.shape[0], per_site, int(degenerate.sum()))


def rmse(pred, truth) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if truth.size == 0:
        raise ValueError("RMSE of an empty test set")
    return MetricReport("rmse", float(np.sqrt(np.mean((pred - truth) ** 2))), truth.shape[0])


def accuracy(pred, truth) -> MetricReport:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if truth.size == 0:
        raise ValueError("accuracy of an empty test set")
    return MetricReport("accuracy", float(100.0 * np.mean(pred == truth)), truth.shape[0])
