"""Masked training objective: label loss, attribute reconstruction loss, lambda annealing."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .model import Prediction
from .schema import Schema

log = logging.getLogger(__name__)


@dataclass
class MaskPlan:
    label_masked: np.ndarray  # (b, d) bool
    attr_masked: np.ndarray  # (b, d) bool
    p_attr: float
    p_label: float
    seed: int | None

    @property
    def input_masked(self) -> np.ndarray:
        """Positions hidden from the model: labels plus masked attributes."""
        return self.label_masked | self.attr_masked


def sample_masks(
    schema: Schema,
    rows: int,
    p_attr: float,
    seed: int | np.random.Generator | None = None,
    observed: np.ndarray | None = None,
    p_label: float = 0.5,
) -> MaskPlan:
    """Mask plan for ``rows`` query rows.

    Every target attribute is label-masked; each observed input attribute
    is independently masked with probability ``p_attr``.
    """
    if not 0.0 <= p_attr <= 1.0:
        raise ValueError(f"p_attr={p_attr} outside [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = schema.d
    label = np.zeros((rows, d), dtype=bool)
    label[:, schema.target_idx] = True
    attr = np.zeros((rows, d), dtype=bool)
    inputs = schema.input_idx
    attr[:, inputs] = rng.random((rows, len(inputs))) < p_attr
    if observed is not None:
        attr &= observed
    return MaskPlan(label, attr, p_attr, p_label, None if isinstance(seed, np.random.Generator) else seed)


def position_losses(pred: Prediction, gold: torch.Tensor) -> torch.Tensor:
    """(b, d) loss per position: cross-entropy for categorical, squared error for continuous."""
    b = gold.shape[0]
    dtype = pred.groups[0].out.dtype
    gold = torch.nan_to_num(gold.to(dtype))
    cols = []
    idx = []
    for g in pred.groups:
        target = gold[:, g.attr_idx]
        if g.categorical:
            logp = F.log_softmax(g.out, dim=-1)
            nll = -logp.gather(-1, target.long().clamp(0, g.out.shape[-1] - 1)[..., None])[..., 0]
            cols.append(nll)
        else:
            cols.append((g.out - target) ** 2)
        idx.append(g.attr_idx)
    order = torch.argsort(torch.cat(idx))
    losses = torch.cat(cols, dim=1)[:, order]
    assert losses.shape == (b, pred.d)
    return losses


def _masked_mean(losses: torch.Tensor, mask) -> torch.Tensor:
    mask = torch.as_tensor(mask, dtype=torch.bool)
    return losses[mask].mean()


def label_loss(pred: Prediction, gold: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
    if not plan.label_masked.any():
        raise ValueError("degenerate batch: no label-masked positions")
    return _masked_mean(position_losses(pred, gold), plan.label_masked)


def attribute_loss(pred: Prediction, gold: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
    if not plan.attr_masked.any():
        log.debug("no attribute-masked positions in batch; attribute loss is 0")
        return torch.zeros((), dtype=pred.groups[0].out.dtype)
    return _masked_mean(position_losses(pred, gold), plan.attr_masked)


@dataclass(frozen=True)
class LambdaSchedule:
    start: float = 0.5
    floor: float = 0.0
    shape: str = "linear"


def lambda_at(step: int, total_steps: int, schedule: LambdaSchedule = LambdaSchedule()) -> float:
    """Weight on the attribute loss: ``start`` at step 0 decaying to ``floor`` at ``total_steps``."""
    if total_steps <= 0:
        return schedule.floor
    frac = min(max(step / total_steps, 0.0), 1.0)
    if schedule.shape == "linear":
        decay = 1.0 - frac
    elif schedule.shape == "cosine":
        decay = 0.5 * (1.0 + math.cos(math.pi * frac))
    else:
        raise ValueError(f"unknown schedule shape {schedule.shape!r}")
    return schedule.floor + (schedule.start - schedule.floor) * decay


@dataclass
class LossBreakdown:
    labels: torch.Tensor
    attributes: torch.Tensor
    lam: float
    total: torch.Tensor


def total_loss(l_labels, l_attributes, lam: float) -> LossBreakdown:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda={lam} outside [0, 1]")
    return LossBreakdown(l_labels, l_attributes, lam, (1 - lam) * l_labels + lam * l_attributes)
