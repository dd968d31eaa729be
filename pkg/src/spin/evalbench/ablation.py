"""Sublayer ablations: identical training runs with parts of the encoder removed."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import RunConfig
from ..data import TEST

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationSpec:
    name: str
    xaba: bool = True
    xabd: bool = True
    abla: bool = True

    @property
    def parametric_only(self) -> bool:
        """No attention path carries training data into the inducing points."""
        return not self.xabd

    def apply(self, cfg: RunConfig) -> RunConfig:
        return cfg.replace(**{"model.xaba": self.xaba, "model.xabd": self.xabd, "model.abla": self.abla})


FULL = AblationSpec("full")
NO_XABD = AblationSpec("-XABD", xabd=False)
NO_ABLA = AblationSpec("-ABLA", abla=False)
NO_XABA_ABLA = AblationSpec("-XABA-ABLA", xaba=False, abla=False)
SPECS = (FULL, NO_XABD, NO_ABLA, NO_XABA_ABLA)


def run_ablation(task, base: RunConfig, specs=SPECS, seeds=(0, 1, 2), split: int = TEST) -> list[dict]:
    """One row per (spec, seed) plus a ``mean`` and an ``sd`` row per spec."""
    from ..training import evaluate, train

    rows = []
    for spec in specs:
        if spec.parametric_only:
            log.info("%s is parametric-only: the encoding ignores the training rows", spec.name)
        values = []
        for seed in seeds:
            cfg = spec.apply(base).replace(seed=seed)
            run, model = train(task, cfg)
            report = evaluate(model, task, split)
            values.append(report.value)
            rows.append({"spec": spec.name, "seed": seed, "metric": report.name, "value": report.value,
                         "best_epoch": run.best_epoch, "parametric_only": spec.parametric_only})
            log.info("%s seed %d: %s = %.3f", spec.name, seed, report.name, report.value)
        sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        for stat, v in (("mean", float(np.mean(values))), ("sd", sd)):
            rows.append({"spec": spec.name, "seed": stat, "metric": report.name, "value": v,
                         "best_epoch": "", "parametric_only": spec.parametric_only})
    return rows


def aggregate(rows: list[dict], spec: str, stat: str = "mean") -> float:
    for r in rows:
        if r["spec"] == spec and r["seed"] == stat:
            return r["value"]
    raise KeyError((spec, stat))


def write_table(rows: list[dict], path: str | Path) -> Path:
    cols = ["spec", "seed", "metric", "value", "best_epoch", "parametric_only"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    return Path(path)
