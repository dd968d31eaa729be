"""Sublayer ablations on the mosaic task, three seeds per configuration.

    python3 scripts/ablation.py --out results/ablation
"""
import argparse
import logging
from pathlib import Path

import torch

from spin.config import RunConfig
from spin.data import mosaic_task
from spin.evalbench.ablation import SPECS, aggregate, run_ablation, write_table

RUN = {"train.lr": 3e-3, "train.epochs": 200, "model.dropout": 0.0}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/ablation")
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    _, task = mosaic_task()
    seeds = tuple(int(s) for s in args.seeds.split(","))
    rows = run_ablation(task, RunConfig().replace(**RUN), SPECS, seeds)
    write_table(rows, out / "ablation.csv")
    for spec in SPECS:
        print(f"{spec.name:12s} {aggregate(rows, spec.name):6.2f} +- {aggregate(rows, spec.name, 'sd'):5.2f}")


if __name__ == "__main__":
    main()
