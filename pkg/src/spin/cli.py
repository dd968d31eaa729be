"""Command-line entry point: ``spin {datagen,train,encode,predict,bench,ablate,tune}``.

Every invocation writes its outputs under ``--out`` together with a
``manifest.json`` recording the resolved configuration, seed, library versions
and a digest of each artifact.  A manifest can be passed back as ``--config``
to rerun with the same configuration.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, validate_config
from .data import (
    TEST,
    TRAIN,
    VAL,
    GenomicPanel,
    breast_cancer_dataset,
    load_csv,
    make_imputation_task,
    mosaic_task,
    write_csv,
)
from .schema import Schema

log = logging.getLogger("spin")

MANIFEST = "manifest.json"
SPLITS = {"train": TRAIN, "val": VAL, "test": TEST}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- config and data


def resolve_config(args) -> RunConfig:
    doc: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path} is not valid JSON: {exc}") from exc
        if "manifest_version" in doc:
            doc = doc["config"]
    overrides = list(args.override or [])
    if args.precision:
        overrides.append(f"precision={json.dumps(args.precision)}")
    if args.no_abla:
        overrides.append("model.abla=false")
    if args.optimizer:
        overrides.append(f"train.optimizer={json.dumps(args.optimizer)}")
    if args.seed is not None:
        key = "data.seed" if args.command == "datagen" else "seed"
        overrides.append(f"{key}={args.seed}")
    return validate_config(doc, overrides)


def _mosaic(cfg: RunConfig):
    d = cfg.data
    counts = (d.n_train, d.n_val, d.n_test)
    if d.path:
        panel = GenomicPanel.load(d.path, d.kmer)
        return panel, make_imputation_task(panel, d.n_inputs, d.n_targets, counts=counts)
    return mosaic_task(d.founders, d.sites, d.rho, d.mu, *counts, seed=d.seed, kmer=d.kmer,
                       n_inputs=d.n_inputs, n_targets=d.n_targets, layout=d.layout, allele_freq=d.allele_freq)


def build_task(cfg: RunConfig):
    """The dataset (or imputation task) a configuration describes."""
    d = cfg.data
    if d.kind == "mosaic":
        return _mosaic(cfg)[1]
    if d.kind == "csv":
        if not d.path or not d.schema:
            raise ConfigError(["data.kind=csv needs data.path and data.schema"])
        return load_csv(d.path, Schema.load(d.schema), d.val_fraction, d.test_fraction, d.seed)
    return breast_cancer_dataset(d.seed)


# ---------------------------------------------------------------- manifest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, argv: list[str], cfg: RunConfig, artifacts: list[Path]) -> Path:
    doc = {
        "manifest_version": 1,
        "command": command,
        "argv": argv,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "versions": {"spin": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "torch": torch.__version__},
        "artifacts": {str(Path(p).resolve().relative_to(out.resolve())): _sha256(Path(p)) for p in artifacts},
    }
    path = out / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- subcommands


def cmd_datagen(args, cfg: RunConfig, out: Path) -> list[Path]:
    written = []
    if cfg.data.kind == "mosaic":
        panel, task = _mosaic(cfg)
        panel.save(out / "panel.txt")
        written += [out / "panel.txt", out / "panel.txt.markers"]
        ds = task.dataset
    else:
        ds = build_task(cfg)
    write_csv(out / "dataset.csv", ds.schema, ds.raw, ds.observed)
    ds.schema.save(out / "schema.json")
    np.savetxt(out / "split.txt", ds.split, fmt="%d")
    return written + [out / "dataset.csv", out / "schema.json", out / "split.txt"]


def cmd_train(args, cfg: RunConfig, out: Path) -> list[Path]:
    from .training import Trainer, evaluate

    task = build_task(cfg)
    trainer = Trainer(task, cfg, out)
    run = trainer.fit()
    report = evaluate(trainer.model, task, TEST)
    metrics = {"metric": run.metric_name, "best_val": run.best_metric, "best_epoch": run.best_epoch,
               "test": report.value, "skipped_steps": run.skipped_steps, "stopped_early": run.stopped_early}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    (out / "config.json").write_text(cfg.to_json() + "\n")
    log.info("best val %s %.3f at epoch %d; test %.3f", run.metric_name, run.best_metric, run.best_epoch, report.value)
    return [out / "checkpoint.bin", out / "history.csv", out / "metrics.json", out / "config.json"]


def _load_model(args):
    from .training import model_from_checkpoint

    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    return model_from_checkpoint(args.checkpoint)


def cmd_encode(args, cfg: RunConfig, out: Path) -> list[Path]:
    from .encoding import EncodedDataset, export_encoding
    from .training import encode_train, task_dataset

    model, ck_cfg, _ = _load_model(args)
    ds = task_dataset(build_task(ck_cfg))
    h_d = encode_train(model, ds)
    enc = EncodedDataset.from_model(model, h_d, len(ds.indices(TRAIN)))
    dtype = np.float64 if model.dtype == torch.float64 else np.float32
    size = export_encoding(enc, out / "encoding.bin", dtype=dtype)
    log.info("wrote %d-byte encoding of %d rows", size, len(ds.indices(TRAIN)))
    return [out / "encoding.bin"]


def cmd_predict(args, cfg: RunConfig, out: Path) -> list[Path]:
    from .encoding import import_encoding
    from .training import predict_split, score, task_dataset

    model, ck_cfg, _ = _load_model(args)
    task = build_task(ck_cfg)
    ds = task_dataset(task)
    split = SPLITS[args.split]
    h_d = import_encoding(args.encoding, model) if args.encoding else None
    pred = predict_split(model, task, split, h_d)
    est = pred.point_estimates().detach().cpu().numpy().astype(np.float64)
    targets = ds.schema.target_idx
    path = out / "predictions.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row"] + [ds.schema.attributes[j].name for j in targets])
        cols = np.stack([ds.destandardize(j, est[:, j]) for j in targets], axis=1)
        for row, values in zip(ds.indices(split), cols):
            w.writerow([int(row)] + [repr(float(v)) for v in values])
    report = score(task, pred, split)
    (out / "metrics.json").write_text(json.dumps({"metric": report.name, "value": report.value,
                                                  "split": args.split, "n": report.n}, indent=2) + "\n")
    return [path, out / "metrics.json"]


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from exc


def cmd_bench(args, cfg: RunConfig, out: Path) -> list[Path]:
    from .evalbench.bench import bench_scaling, write_report

    methods = [m for m in args.methods.split(",") if m]
    m = cfg.model
    records, summary = bench_scaling(methods, _int_list(args.grid), isolate=not args.in_process,
                                     d=args.d, h=m.h, f=m.f, e=m.e, steps=args.steps, warmup=args.warmup,
                                     seed=cfg.seed)
    for method, s in summary.items():
        log.info("%s: exponent %.3f (fit r2 %.3f)", method, s["exponent"], s["r2"])
    return write_report(records, summary, out, plots=args.plots)


def cmd_ablate(args, cfg: RunConfig, out: Path) -> list[Path]:
    from .evalbench import ablation

    by_name = {s.name: s for s in ablation.SPECS}
    names = [s for s in args.specs.split(",") if s]
    unknown = [s for s in names if s not in by_name]
    if unknown:
        raise UsageError(f"unknown ablation spec(s) {unknown}; choose from {sorted(by_name)}")
    rows = ablation.run_ablation(build_task(cfg), cfg, [by_name[s] for s in names], tuple(_int_list(args.seeds)))
    return [ablation.write_table(rows, out / "ablation.csv")]


def _grid_entry(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise UsageError(f"--grid entries look like key=v1,v2; got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), [json.loads(v) for v in raw.split(",")]


def cmd_tune(args, cfg: RunConfig, out: Path) -> list[Path]:
    from .training import tune

    if not args.grid:
        raise UsageError("tune needs at least one --grid key=v1,v2 entry")
    grid = dict(_grid_entry(g) for g in args.grid)
    best, rows = tune(build_task(cfg), cfg, grid, out / "tune.csv")
    (out / "best_config.json").write_text(best.to_json() + "\n")
    return [out / "tune.csv", out / "best_config.json"]


COMMANDS = {
    "datagen": cmd_datagen, "train": cmd_train, "encode": cmd_encode, "predict": cmd_predict,
    "bench": cmd_bench, "ablate": cmd_ablate, "tune": cmd_tune,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (or a previous manifest.json)")
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--seed", type=int, help="run seed (for datagen: the data seed)")
    common.add_argument("--override", action="append", metavar="K=V", help="dotted override, e.g. model.e=32")
    common.add_argument("--precision", choices=("single", "double"))
    common.add_argument("--no-abla", action="store_true", help="drop the ABLA sublayers")
    common.add_argument("--optimizer", choices=("adamw", "lamb-lookahead"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="spin", description="Semi-parametric inducing-point networks")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("datagen", parents=[common], help="generate or export the configured dataset")
    sub.add_parser("train", parents=[common], help="train and keep the best checkpoint")
    p = sub.add_parser("encode", parents=[common], help="export the dataset encoding of a checkpoint")
    p.add_argument("--checkpoint")
    p = sub.add_parser("predict", parents=[common], help="predict a split from a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--encoding", help="use an exported encoding instead of re-encoding the train split")
    p.add_argument("--split", choices=sorted(SPLITS), default="test")
    p = sub.add_parser("bench", parents=[common], help="time and memory scaling against n")
    p.add_argument("--grid", default="512,1024,2048,4096,8192")
    p.add_argument("--methods", default="spin,quadratic")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--plots", action="store_true", help="also write SVG plots")
    p.add_argument("--in-process", action="store_true", help="skip the per-point worker processes")
    p = sub.add_parser("ablate", parents=[common], help="train sublayer ablations over seeds")
    p.add_argument("--specs", default="full,-XABD,-ABLA,-XABA-ABLA")
    p.add_argument("--seeds", default="0,1,2")
    p = sub.add_parser("tune", parents=[common], help="grid search on the validation metric")
    p.add_argument("--grid", action="append", metavar="K=V1,V2")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        if "SPIN_NUM_THREADS" in os.environ:
            torch.set_num_threads(int(os.environ["SPIN_NUM_THREADS"]))
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        artifacts = COMMANDS[args.command](args, cfg, out)
        write_manifest(out, args.command, argv, cfg, artifacts)
        return 0
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any runtime failure with diagnostics
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
