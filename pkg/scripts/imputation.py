"""SPIN against the KNN imputer on the mosaic panel (default and no-switching variants).

    python3 scripts/imputation.py --out results/imputation
"""
import argparse
import json
import logging
import time
from pathlib import Path

import torch

from spin.config import RunConfig
from spin.data import TEST, VAL, mosaic_task
from spin.evalbench.baselines import knn_baseline, tune_knn
from spin.training import evaluate, train

RUN = {"train.lr": 3e-3, "train.epochs": 200, "model.dropout": 0.0}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/imputation")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for name, kw in (("default", {}), ("no_switching", {"rho": 0.0, "mu": 0.0})):
        _, task = mosaic_task(**kw)
        k, _ = tune_knn(task, VAL)
        knn = knn_baseline(task, TEST, k).value
        t0 = time.perf_counter()
        run, model = train(task, RunConfig().replace(**RUN, seed=args.seed), out / name)
        spin = evaluate(model, task, TEST).value
        rows.append({"task": name, "spin_r2": spin, "knn_r2": knn, "knn_k": k,
                     "best_epoch": run.best_epoch, "train_seconds": time.perf_counter() - t0})
        logging.info("%s: SPIN %.2f, KNN(k=%d) %.2f", name, spin, k, knn)
    (out / "summary.json").write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
