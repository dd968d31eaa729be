"""Breast Cancer (Wisconsin) accuracy over 10 cross-validation splits.

The configuration is tuned once on the validation rows of the first split.

    python3 scripts/breast_cancer.py --out results/breast_cancer
"""
import argparse
import csv
import logging
from pathlib import Path

import numpy as np
import torch

from spin.config import RunConfig
from spin.data import TEST, breast_cancer_dataset, cv_splits
from spin.training import evaluate, train, tune

# one optimizer step per epoch without batching; patience = epochs disables early stopping
BASE = {"model.depth": 8, "model.dropout": 0.5, "train.label_mask": 0.5, "train.attr_mask": 0.3,
        "train.slice_size": 1024, "train.epochs": 200, "train.patience": 200}
GRID = {"model.e": [16, 32], "train.lr": [1e-3, 3e-3]}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/breast_cancer")
    ap.add_argument("--folds", type=int, default=10)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    folds = list(cv_splits(breast_cancer_dataset(), args.folds, seed=0))
    best, _ = tune(folds[0], RunConfig().replace(**BASE), GRID, out / "tune.csv")
    scores = []
    for i, fold in enumerate(folds):
        _, model = train(fold, best)
        scores.append(evaluate(model, fold, TEST).value)
        logging.info("fold %d: %.2f", i, scores[-1])
    with open(out / "folds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "accuracy"])
        w.writerows(enumerate(scores))
    print(f"accuracy {np.mean(scores):.2f} +- {np.std(scores, ddof=1):.2f} (e={best.model.e}, lr={best.train.lr})")


if __name__ == "__main__":
    main()
