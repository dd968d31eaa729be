"""Baselines: a Hamming-distance KNN imputer and attention between all datapoints."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..attention import MAB
from ..config import ModelConfig
from ..data import TRAIN, ImputationTask, dekmerize
from ..model import AttributeEmbedding, OutputHead, Prediction, fold, unfold
from ..numerics import LayerNorm, flop_tag
from ..schema import Schema
from .metrics import MetricReport, pearson_r2

KNN_GRID = tuple(range(2, 65))


def hamming(a: np.ndarray, b: np.ndarray, observed: np.ndarray | None = None) -> np.ndarray:
    """(q, s) x (n, s) binary -> (q, n) mismatch counts over observed sites."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if observed is not None:
        a = a[:, observed]
        b = b[:, observed]
    return a.sum(1)[:, None] + b.sum(1)[None, :] - 2.0 * a @ b.T


def knn_impute(
    train_inputs: np.ndarray,
    train_targets: np.ndarray,
    query_inputs: np.ndarray,
    k: int,
    observed: np.ndarray | None = None,
) -> np.ndarray:
    """Distance-weighted k-nearest-neighbour vote per target site.

    Neighbours are ranked by Hamming distance, ties broken by training row
    order.  Weights are 1/distance; when any selected neighbour matches the
    query exactly, only the exact matches vote.  A tied vote yields allele 0.
    """
    n = len(train_inputs)
    if not 1 <= k <= n:
        raise ValueError(f"k_neighbors={k} must lie in [1, {n}]")
    dist = hamming(query_inputs, train_inputs, observed)
    nbr = np.argsort(dist, axis=1, kind="stable")[:, :k]
    d = np.take_along_axis(dist, nbr, axis=1)
    exact = d == 0
    with np.errstate(divide="ignore"):
        w = np.where(exact.any(1, keepdims=True), exact.astype(np.float64), 1.0 / d)
    votes = np.einsum("qk,qks->qs", w, np.asarray(train_targets, dtype=np.float64)[nbr])
    return (votes > 0.5 * w.sum(1, keepdims=True)).astype(np.uint8)


def _task_bits(task: ImputationTask, split: int) -> tuple[np.ndarray, np.ndarray]:
    ds = task.dataset
    idx = ds.indices(split)
    x = dekmerize(ds.raw[idx][:, ds.schema.input_idx].astype(np.int64), task.k)
    y = dekmerize(ds.raw[idx][:, ds.schema.target_idx].astype(np.int64), task.k)
    return x, y


def knn_baseline(task: ImputationTask, split: int, k: int) -> MetricReport:
    x_tr, y_tr = _task_bits(task, TRAIN)
    x_q, y_q = _task_bits(task, split)
    return pearson_r2(knn_impute(x_tr, y_tr, x_q, k), y_q)


def tune_knn(task: ImputationTask, val_split: int, grid=KNN_GRID) -> tuple[int, dict[int, float]]:
    """Best k on ``val_split``; ties go to the smaller k."""
    x_tr, y_tr = _task_bits(task, TRAIN)
    x_v, y_v = _task_bits(task, val_split)
    scores = {}
    for k in grid:
        if k <= len(x_tr):
            scores[k] = pearson_r2(knn_impute(x_tr, y_tr, x_v, k), y_v).value
    best = max(scores, key=lambda k: (scores[k], -k))
    return best, scores


# ---------------------------------------------------------------- attention between datapoints


def quadratic_abd(x: torch.Tensor, block: MAB) -> torch.Tensor:
    """Every datapoint attends to every other, each flattened to one (d*e) token."""
    return fold(block(unfold(x), unfold(x)), x.shape[1])


class QuadraticBaseline(nn.Module):
    """Alternating attention between datapoints and between attributes on the full table.

    Shares the embedding and output heads of :class:`~spin.model.SpinModel`;
    every layer costs O(n^2 d e) through the datapoint attention.
    """

    def __init__(self, schema: Schema, cfg: ModelConfig) -> None:
        super().__init__()
        e, d = cfg.e, schema.d
        if (d * e) % cfg.heads:
            raise ValueError(f"d*e={d * e} not divisible by {cfg.heads} heads")
        self.schema = schema
        self.cfg = cfg
        self.embedding = AttributeEmbedding(schema, e)
        self.abd = nn.ModuleList(MAB(d * e, cfg.heads, cfg.dropout) for _ in range(cfg.n_layers))
        self.aba = nn.ModuleList(MAB(e, cfg.heads, cfg.dropout) for _ in range(cfg.n_layers))
        self.norm = LayerNorm(e)
        self.head = OutputHead(schema, e)

    @property
    def dtype(self) -> torch.dtype:
        return self.embedding.attr.dtype

    def forward(self, values, masked) -> Prediction:
        values = torch.as_tensor(values).to(self.dtype)
        masked = torch.as_tensor(masked, dtype=torch.bool)
        with flop_tag("embed"):
            x = self.embedding(values, masked)
        for i, (abd, aba) in enumerate(zip(self.abd, self.aba)):
            with flop_tag(f"layer{i}/abd"):
                x = quadratic_abd(x, abd)
            with flop_tag(f"layer{i}/aba"):
                x = aba(x, x)
        with flop_tag("predict"):
            return self.head(self.norm(x))
