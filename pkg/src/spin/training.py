"""Optimization: AdamW / lookahead-Lamb steps, slice-batched training, checkpointing, tuning."""
from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from . import encoding
from .config import RunConfig, validate_config
from .data import TEST, TRAIN, VAL, ImputationTask, TabularDataset, slice_batches
from .evalbench.metrics import MetricReport, accuracy, pearson_r2, rmse
from .model import Prediction, SpinModel
from .numerics import DTYPES
from .objective import (
    LambdaSchedule,
    LossBreakdown,
    attribute_loss,
    label_loss,
    lambda_at,
    sample_masks,
    total_loss,
)
from .schema import CATEGORICAL

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- optimizers


class Lamb(torch.optim.Optimizer):
    """Adam moments with a layer-wise trust ratio ||w|| / ||update||."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-6, weight_decay=0.0, max_trust=10.0):
        super().__init__(params, dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay, max_trust=max_trust))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = torch.zeros((), dtype=torch.float64)
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"].item()
                m, v = state["exp_avg"], state["exp_avg_sq"]
                m.mul_(beta1).add_(p.grad, alpha=1 - beta1)
                v.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)
                update = (m / (1 - beta1 ** t)) / ((v / (1 - beta2 ** t)).sqrt() + group["eps"])
                if group["weight_decay"]:
                    update = update + group["weight_decay"] * p
                w_norm = p.norm().item()
                u_norm = update.norm().item()
                trust = 1.0 if w_norm == 0 or u_norm == 0 else min(w_norm / u_norm, group["max_trust"])
                p.add_(update, alpha=-group["lr"] * trust)


class Lookahead:
    """Every ``k`` inner steps, move slow weights ``alpha`` of the way to the fast ones and reset."""

    def __init__(self, inner: torch.optim.Optimizer, k: int = 5, alpha: float = 0.5) -> None:
        self.inner = inner
        self.k = k
        self.alpha = alpha
        self.counter = 0
        self.slow = [p.detach().clone() for g in inner.param_groups for p in g["params"]]

    @property
    def param_groups(self):
        return self.inner.param_groups

    def zero_grad(self, set_to_none: bool = True) -> None:
        self.inner.zero_grad(set_to_none=set_to_none)

    @torch.no_grad()
    def step(self) -> None:
        self.inner.step()
        self.counter += 1
        if self.counter % self.k == 0:
            fast = [p for g in self.inner.param_groups for p in g["params"]]
            for s, p in zip(self.slow, fast):
                s.lerp_(p, self.alpha)
                p.copy_(s)

    def state_dict(self) -> dict:
        return {"inner": self.inner.state_dict(), "slow": [s.clone() for s in self.slow], "counter": self.counter}

    def load_state_dict(self, state: dict) -> None:
        self.inner.load_state_dict(state["inner"])
        self.slow = [s.clone() for s in state["slow"]]
        self.counter = state["counter"]


def make_optimizer(params, cfg: RunConfig):
    t = cfg.train
    params = list(params)
    if t.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=t.lr, betas=tuple(t.betas), weight_decay=t.weight_decay)
    return Lookahead(Lamb(params, lr=t.lr, betas=t.betas, weight_decay=t.weight_decay), t.lookahead_k, t.lookahead_alpha)


@dataclass
class StepGuard:
    """Tracks skipped updates; three consecutive non-finite gradients abort training."""

    max_consecutive: int = 3
    consecutive: int = 0
    skipped: int = 0


def step(params: list[torch.Tensor], optimizer, clip_norm: float, guard: StepGuard) -> bool:
    """Clip to ``clip_norm`` global norm and apply one update; returns False if skipped."""
    norm = torch.nn.utils.clip_grad_norm_(params, clip_norm)
    if not torch.isfinite(norm):
        guard.consecutive += 1
        guard.skipped += 1
        log.warning("non-finite gradient norm; skipping update (%d consecutive)", guard.consecutive)
        optimizer.zero_grad(set_to_none=True)
        if guard.consecutive >= guard.max_consecutive:
            raise TrainingDiverged(f"{guard.consecutive} consecutive non-finite gradient steps")
        return False
    guard.consecutive = 0
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return True


# ---------------------------------------------------------------- evaluation


def task_dataset(task) -> TabularDataset:
    return task.dataset if isinstance(task, ImputationTask) else task


def predict_split(model: SpinModel, task, split: int, h_d: torch.Tensor | None = None) -> Prediction:
    """Encode the full train split and predict ``split`` rows with labels hidden."""
    ds = task_dataset(task)
    model.eval()
    if h_d is None:
        h_d = encode_train(model, ds)
    values, observed = ds.rows(split)
    masked = ~observed
    masked[:, ds.schema.target_idx] = True
    return model.predict_rows(values, masked, h_d)


def encode_train(model: SpinModel, ds: TabularDataset) -> torch.Tensor:
    values, observed = ds.rows(TRAIN)
    model.eval()
    return model.encode_rows(values, ~observed)


def score(task, pred: Prediction, split: int) -> MetricReport:
    """Task metric of a prediction for the rows of ``split``."""
    ds = task_dataset(task)
    est = pred.point_estimates().detach().cpu().numpy().astype(np.float64)
    if isinstance(task, ImputationTask):
        return pearson_r2(task.decode(est), task.target_alleles(split))
    idx = ds.indices(split)
    targets = ds.schema.target_idx
    cat = [j for j in targets if ds.schema.attributes[j].kind == CATEGORICAL]
    if cat:
        return accuracy(est[:, cat], ds.raw[idx][:, cat])
    pred_raw = np.stack([ds.destandardize(j, est[:, j]) for j in targets], axis=1)
    return rmse(pred_raw, ds.raw[idx][:, targets])


def evaluate(model: SpinModel, task, split: int = TEST, h_d=None) -> MetricReport:
    return score(task, predict_split(model, task, split, h_d), split)


# ---------------------------------------------------------------- training loop


@dataclass
class TrainRun:
    config: RunConfig
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = math.nan
    metric_name: str = ""
    checkpoint: str | None = None
    skipped_steps: int = 0
    stopped_early: bool = False

    def write_history(self, path: str | Path) -> None:
        cols = ["epoch", "split", "loss_labels", "loss_attributes", "lambda", "task_metric"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.history:
                w.writerow({c: row.get(c, "") for c in cols})


class Trainer:
    def __init__(self, task, cfg: RunConfig, out_dir: str | Path | None = None) -> None:
        self.task = task
        self.ds = task_dataset(task)
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir else None
        self.dtype = DTYPES[cfg.precision]
        torch.manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.model = SpinModel(self.ds.schema, cfg.model).to(self.dtype)
        self.params = list(self.model.parameters())
        self.optimizer = make_optimizer(self.params, cfg)
        self.guard = StepGuard()
        self.train_idx = self.ds.indices(TRAIN)
        if len(self.train_idx) < 2 or len(self.ds.indices(VAL)) == 0:
            raise ValueError("training needs >= 2 train rows and a non-empty val split")
        self.steps_per_epoch = len(slice_batches(len(self.train_idx), cfg.train.slice_size, cfg.train.label_mask, 0))
        self.total_steps = cfg.train.epochs * self.steps_per_epoch
        self.schedule = LambdaSchedule(cfg.train.lambda_start, cfg.train.lambda_floor, cfg.train.lambda_shape)
        self.step_count = 0
        self.epoch = 0
        self.run = TrainRun(cfg)
        self.lambdas: list[float] = []
        self._best_state: dict | None = None
        self._since_best = 0

    # one gradient update on one slice
    def train_step(self, context_idx: np.ndarray, query_idx: np.ndarray) -> LossBreakdown:
        ds, t = self.ds, self.cfg.train
        self.model.train()
        ctx = self.model.embed(ds.values[context_idx], ~ds.observed[context_idx])
        plan = sample_masks(ds.schema, len(query_idx), t.attr_mask, self.rng, ds.observed[query_idx], t.label_mask)
        hidden = plan.input_masked | ~ds.observed[query_idx]
        qry = self.model.embed(ds.values[query_idx], hidden)
        pred = self.model(ctx, qry)
        lam = lambda_at(self.step_count, self.total_steps, self.schedule)
        self.lambdas.append(lam)
        losses = total_loss(label_loss(pred, qry.gold, plan), attribute_loss(pred, qry.gold, plan), lam)
        if not torch.isfinite(losses.total):
            log.warning("non-finite loss at step %d: %s", self.step_count, losses)
        losses.total.backward()
        step(self.params, self.optimizer, t.clip_norm, self.guard)
        self.step_count += 1
        return losses

    def train_epoch(self) -> dict:
        t = self.cfg.train
        sums = np.zeros(2)
        lams = []
        slices = slice_batches(self.train_idx, t.slice_size, t.label_mask, self.rng)
        for sl in slices:
            out = self.train_step(sl.context, sl.query)
            sums += [out.labels.item(), out.attributes.item()]
            lams.append(out.lam)
        self.epoch += 1
        return {
            "epoch": self.epoch, "split": "train",
            "loss_labels": sums[0] / len(slices), "loss_attributes": sums[1] / len(slices),
            "lambda": float(np.mean(lams)), "task_metric": "",
        }

    @torch.no_grad()
    def validate(self) -> tuple[dict, MetricReport]:
        from .objective import position_losses

        pred = predict_split(self.model, self.task, VAL)
        values, _ = self.ds.rows(VAL)
        pos = position_losses(pred, torch.as_tensor(values))
        val_loss = pos[:, self.ds.schema.target_idx].mean().item()
        report = score(self.task, pred, VAL)
        row = {"epoch": self.epoch, "split": "val", "loss_labels": val_loss, "loss_attributes": "",
               "lambda": "", "task_metric": report.value}
        return row, report

    def _improved(self, report: MetricReport) -> bool:
        best = self.run.best_metric
        if math.isnan(best):
            return True
        return report.value > best if report.higher_is_better else report.value < best

    def fit(self) -> TrainRun:
        t = self.cfg.train
        while self.epoch < t.epochs:
            row = self.train_epoch()
            if not math.isfinite(row["loss_labels"]):
                raise TrainingDiverged(f"label loss became non-finite at epoch {self.epoch}")
            self.run.history.append(row)
            if self.epoch % t.eval_every and self.epoch != t.epochs:
                continue
            vrow, report = self.validate()
            self.run.history.append(vrow)
            self.run.metric_name = report.name
            if self._improved(report):
                self.run.best_metric = report.value
                self.run.best_epoch = self.epoch
                self._best_state = copy.deepcopy(self.model.state_dict())
                self._since_best = 0
                if self.out_dir:
                    self.run.checkpoint = str(self.save_checkpoint(self.out_dir / "checkpoint.bin"))
            else:
                self._since_best += t.eval_every
                if self._since_best >= t.patience:
                    self.run.stopped_early = True
                    break
        if self._best_state is not None:
            self.model.load_state_dict(self._best_state)
        self.run.skipped_steps = self.guard.skipped
        if self.out_dir:
            self.run.write_history(self.out_dir / "history.csv")
        return self.run

    # ------------------------------------------------------------ checkpoints

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        opt = self.optimizer.state_dict()
        inner = opt["inner"] if "inner" in opt else opt
        extra = {"rng/torch": torch.get_rng_state()}
        for pid, st in inner["state"].items():
            for key, val in st.items():
                extra[f"optim/state/{pid}/{key}"] = torch.as_tensor(val)
        if "slow" in opt:
            for i, s in enumerate(opt["slow"]):
                extra[f"optim/slow/{i}"] = s
        meta = {
            "config": self.cfg.to_dict(),
            "schema": self.ds.schema.to_dict(),
            "epoch": self.epoch,
            "step": self.step_count,
            "numpy_rng": self.rng.bit_generator.state,
            "optim_groups": inner["param_groups"],
            "lookahead_counter": opt.get("counter"),
            "best_epoch": self.run.best_epoch,
            "best_metric": self.run.best_metric,
        }
        tmp = path.with_suffix(".tmp")
        encoding.save_checkpoint(tmp, self.model, meta, extra)
        os.replace(tmp, path)
        return path

    def load_checkpoint(self, path: str | Path) -> None:
        meta, tensors, _ = encoding.load_checkpoint(path)
        load_model_state(self.model, tensors)
        state: dict = {}
        for name, val in tensors.items():
            if name.startswith("optim/state/"):
                _, _, pid, key = name.split("/", 3)
                state.setdefault(int(pid), {})[key] = val
        inner = {"state": state, "param_groups": meta["optim_groups"]}
        if isinstance(self.optimizer, Lookahead):
            slow = [tensors[f"optim/slow/{i}"] for i in range(len(self.params))]
            self.optimizer.load_state_dict({"inner": inner, "slow": slow, "counter": meta["lookahead_counter"]})
        else:
            self.optimizer.load_state_dict(inner)
        self.epoch = meta["epoch"]
        self.step_count = meta["step"]
        self.rng.bit_generator.state = meta["numpy_rng"]
        torch.set_rng_state(tensors["rng/torch"])
        self.run.best_epoch = meta["best_epoch"]
        self.run.best_metric = meta["best_metric"]


def load_model_state(model: SpinModel, tensors: dict[str, torch.Tensor]) -> None:
    state = {k[len("param/"):]: v.to(model.dtype) for k, v in tensors.items() if k.startswith("param/")}
    model.load_state_dict(state)


def model_from_checkpoint(path: str | Path) -> tuple[SpinModel, RunConfig, dict]:
    from .schema import Schema

    meta, tensors, _ = encoding.load_checkpoint(path)
    cfg = validate_config(meta["config"])
    model = SpinModel(Schema.from_dict(meta["schema"]), cfg.model).to(DTYPES[cfg.precision])
    load_model_state(model, tensors)
    model.eval()
    return model, cfg, meta


def train(task, cfg: RunConfig, out_dir: str | Path | None = None) -> tuple[TrainRun, SpinModel]:
    trainer = Trainer(task, cfg, out_dir)
    run = trainer.fit()
    return run, trainer.model


# ---------------------------------------------------------------- tuning

# legal tuning bands for transformer hyperparameters (genomics / UCI grids)
TUNING_RANGES = {
    "model.e": (16, 128),
    "model.depth": (2, 8),
    "train.label_mask": (0.0, 0.5),
    "train.attr_mask": (0.3, 0.3),
    "train.lr": (1e-5, 1e-2),
    "model.dropout": (0.4, 0.6),
}


def expand_grid(grid: dict[str, Iterable]) -> list[dict]:
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(list(grid[k]) for k in keys))]


def tune(task, base: RunConfig, grid: dict[str, Iterable], out_path: str | Path | None = None):
    """Grid search on the validation metric; returns (best config, result rows)."""
    combos = expand_grid(grid)
    for combo in combos:
        for key, value in combo.items():
            lo, hi = TUNING_RANGES.get(key, (-math.inf, math.inf))
            if isinstance(value, (int, float)) and not lo <= value <= hi:
                log.warning("tuning value %s=%s lies outside the usual range [%s, %s]", key, value, lo, hi)
    rows = []
    best_cfg, best_val, best_hib = None, None, True
    for combo in combos:
        cfg = base.replace(**combo)
        try:
            run, _ = train(task, cfg)
            value, higher = run.best_metric, run.metric_name != "rmse"
        except TrainingDiverged as exc:
            log.warning("config %s diverged: %s", combo, exc)
            value, higher = math.nan, True
        rows.append({**combo, "val_metric": value})
        if math.isnan(value):
            continue
        if best_val is None or (value > best_val if higher else value < best_val):
            best_cfg, best_val, best_hib = cfg, value, higher
    if best_cfg is None:
        best_cfg = base.replace(**combos[0])
    if out_path:
        with open(out_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return best_cfg, rows
