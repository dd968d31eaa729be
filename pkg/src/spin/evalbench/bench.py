"""Scaling benchmark: step time and peak memory against training-set size.

Each grid point runs in a fresh worker process so that allocator state from
one point cannot leak into the next, and an out-of-memory point is recorded
instead of taking the harness down.  Inside the worker, data generation and
model construction happen in their own phases; only ``step`` phases are timed.
"""
from __future__ import annotations

import csv
import json
import math
import os
import subprocess
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..config import ModelConfig
from ..model import SpinModel
from ..objective import attribute_loss, label_loss, sample_masks, total_loss
from ..schema import CATEGORICAL, INPUT, TARGET, Attribute, Schema
from .baselines import QuadraticBaseline
from .params import param_count

METHODS = ("spin", "quadratic")
DEFAULT_GRID = (512, 1024, 2048, 4096, 8192)
VOCAB = 32
N_QUERY = 256


@dataclass
class BenchRecord:
    method: str
    n: int
    d: int
    h: int
    f: int
    e: int
    slice_size: int
    step_time: float = math.nan  # seconds, mean over timed steps
    peak_bytes: int = -1
    params: int = -1
    latency: float = math.nan  # seconds per query row after encoding (spin only)
    status: str = "ok"
    phases: list = field(default_factory=list)


class PhaseLog:
    def __init__(self) -> None:
        self.entries: list[tuple[str, float, float]] = []

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.entries.append((name, t0, time.perf_counter()))

    def durations(self, name: str) -> list[float]:
        return [t1 - t0 for p, t0, t1 in self.entries if p == name]


# ---------------------------------------------------------------- process memory


def _status_kb(field_name: str) -> int:
    with open("/proc/self/status") as fh:
        for line in fh:
            if line.startswith(field_name + ":"):
                return int(line.split()[1])
    raise RuntimeError(f"{field_name} not found in /proc/self/status")


def reset_peak() -> bool:
    """Reset the kernel's resident high-water mark; False where unsupported."""
    try:
        with open("/proc/self/clear_refs", "w") as fh:
            fh.write("5")
        return True
    except OSError:
        return False


@contextmanager
def peak_rss():
    """Yields a dict whose ``bytes`` is the resident growth above the entry level."""
    out = {"bytes": -1}
    ok = reset_peak()
    before = _status_kb("VmRSS")
    try:
        yield out
    finally:
        if ok:
            out["bytes"] = max(0, _status_kb("VmHWM") - before) * 1024


# ---------------------------------------------------------------- one grid point


def bench_schema(d: int) -> Schema:
    n_targets = max(1, d // 4)
    attrs = [Attribute(f"x{i:02d}", CATEGORICAL, INPUT, VOCAB) for i in range(d - n_targets)]
    attrs += [Attribute(f"y{i:02d}", CATEGORICAL, TARGET, VOCAB) for i in range(n_targets)]
    return Schema(tuple(attrs))


def _loss(pred, gold, plan):
    return total_loss(label_loss(pred, gold, plan), attribute_loss(pred, gold, plan), 0.5).total


def run_point(method: str, n: int, d: int = 32, h: int = 10, f: int = 10, e: int = 16,
              steps: int = 5, warmup: int = 1, seed: int = 0) -> BenchRecord:
    """One training step per repetition over all ``n`` rows as a single slice."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if warmup < 1 or steps < 1:
        raise ValueError("need at least one warmup step and one timed step")
    torch.manual_seed(seed)
    log = PhaseLog()
    rec = BenchRecord(method, n, d, h, f, e, slice_size=n)
    schema = bench_schema(d)
    with log.phase("datagen"):
        rng = np.random.default_rng(seed)
        values = torch.as_tensor(rng.integers(VOCAB, size=(n, d)), dtype=torch.float32)
        n_query = max(1, n // 2)
        plan = sample_masks(schema, n_query, 0.3, rng)
        hidden = torch.as_tensor(plan.input_masked)
    with log.phase("build"):
        cfg = ModelConfig(e=e, h=h, f=f, dropout=0.0)
        model = SpinModel(schema, cfg) if method == "spin" else QuadraticBaseline(schema, cfg)
        opt = torch.optim.AdamW(model.parameters(), lr=1e-4)
        rec.params = param_count(model)
        ctx_mask = torch.zeros(n - n_query, d, dtype=torch.bool)
        gold = values[n - n_query:]

    def one_step():
        opt.zero_grad(set_to_none=True)
        if method == "spin":
            ctx = model.embed(values[: n - n_query], ctx_mask)
            qry = model.embed(gold, hidden)
            pred = model(ctx, qry)
        else:
            mask = torch.cat([ctx_mask, hidden])
            pred = model(values, mask)
            pred = _tail(pred, n_query)
        _loss(pred, gold, plan).backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()

    model.train()
    # the first step runs on a fresh heap, so its resident growth is the step's footprint
    with peak_rss() as mem, log.phase("warmup"):
        one_step()
    rec.peak_bytes = mem["bytes"]
    for _ in range(warmup - 1):
        with log.phase("warmup"):
            one_step()
    for _ in range(steps):
        with log.phase("step"):
            one_step()
    rec.step_time = float(np.mean(log.durations("step")))
    if method == "spin":
        rec.latency = _latency(model, values, ctx_mask, schema, rng, log)
    rec.phases = [(p, t0, t1) for p, t0, t1 in log.entries]
    return rec


def _tail(pred, m: int):
    from ..model import HeadOutput, Prediction

    return Prediction([HeadOutput(g.attr_idx, g.out[-m:], g.categorical) for g in pred.groups], pred.d)


@torch.no_grad()
def _latency(model: SpinModel, values, ctx_mask, schema: Schema, rng, log: PhaseLog, repeats: int = 25) -> float:
    model.eval()
    n_ctx = ctx_mask.shape[0]
    with log.phase("encode"):
        h_d = model.encode_rows(values[:n_ctx], ctx_mask)
    queries = torch.as_tensor(rng.integers(VOCAB, size=(N_QUERY, schema.d)), dtype=torch.float32)
    masked = torch.zeros(N_QUERY, schema.d, dtype=torch.bool)
    masked[:, schema.target_idx] = True
    model.predict_rows(queries, masked, h_d)
    for _ in range(repeats):
        with log.phase("infer"):
            model.predict_rows(queries, masked, h_d)
    # minimum over repeats: the least noise-contaminated estimate of a fixed cost
    return float(np.min(log.durations("infer"))) / N_QUERY


# ---------------------------------------------------------------- grid driver


def _worker_env() -> dict:
    env = dict(os.environ)
    threads = env.get("SPIN_NUM_THREADS", "1")
    env.update(OMP_NUM_THREADS=threads, MKL_NUM_THREADS=threads, SPIN_NUM_THREADS=threads)
    return env


def run_isolated(method: str, n: int, timeout: float | None = None, **kw) -> BenchRecord:
    args = json.dumps({"method": method, "n": n, **kw})
    proc = subprocess.run(
        [sys.executable, "-m", "spin.evalbench.bench", args],
        capture_output=True, text=True, env=_worker_env(), timeout=timeout,
    )
    dims = {k: kw.get(k, v) for k, v in (("d", 32), ("h", 10), ("f", 10), ("e", 16))}
    if proc.returncode != 0:
        oom = proc.returncode < 0 or "MemoryError" in proc.stderr or "DefaultCPUAllocator" in proc.stderr
        if not oom:
            raise RuntimeError(f"bench worker failed for {method} n={n}:\n{proc.stderr[-2000:]}")
        return BenchRecord(method, n, slice_size=n, status="oom", **dims)
    return BenchRecord(**json.loads(proc.stdout.strip().splitlines()[-1]))


def fit_exponent(ns, times) -> tuple[float, float]:
    """Least-squares slope of log(time) on log(n) and the fit's R^2."""
    x, y = np.log(np.asarray(ns, float)), np.log(np.asarray(times, float))
    if len(x) < 2:
        return math.nan, math.nan
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss = ((y - y.mean()) ** 2).sum()
    return float(slope), float(1 - (resid ** 2).sum() / ss) if ss > 0 else 1.0


@torch.no_grad()
def interleaved_latency(grid, d: int = 32, h: int = 10, f: int = 10, e: int = 16, rounds: int = 8,
                        repeats: int = 25, seed: int = 0, **_) -> dict[int, float]:
    """Per-row inference latency against encodings of each ``n``, timed round-robin in one process.

    Timing noise on a shared host drifts on a scale of seconds and differs between
    processes, so measuring each ``n`` in its own worker confounds the comparison.
    Alternating between encodings cancels the drift; the minimum over all calls is kept.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    schema = bench_schema(d)
    model = SpinModel(schema, ModelConfig(e=e, h=h, f=f, dropout=0.0)).eval()
    encodings = {}
    for n in grid:
        values = torch.as_tensor(rng.integers(VOCAB, size=(n, d)), dtype=torch.float32)
        encodings[n] = model.encode_rows(values, torch.zeros(n, d, dtype=torch.bool))
    queries = torch.as_tensor(rng.integers(VOCAB, size=(N_QUERY, d)), dtype=torch.float32)
    masked = torch.zeros(N_QUERY, d, dtype=torch.bool)
    masked[:, schema.target_idx] = True
    best = dict.fromkeys(encodings, math.inf)
    for r in range(rounds + 1):
        order = list(encodings)[r % len(encodings):] + list(encodings)[: r % len(encodings)]
        for n in order:
            for _ in range(repeats):
                t0 = time.perf_counter()
                model.predict_rows(queries, masked, encodings[n])
                if r:  # round 0 is warm-up
                    best[n] = min(best[n], time.perf_counter() - t0)
    return {n: t / N_QUERY for n, t in best.items()}


def bench_scaling(methods=METHODS, grid=DEFAULT_GRID, isolate: bool = True, **kw) -> tuple[list[BenchRecord], dict]:
    """Time and memory per isolated grid point; SPIN latency comes from :func:`interleaved_latency`."""
    records = []
    for method in methods:
        for n in grid:
            rec = run_isolated(method, n, **kw) if isolate else run_point(method, n, **kw)
            records.append(rec)
    if "spin" in methods:
        latency = interleaved_latency(grid, **kw)
        for rec in records:
            if rec.method == "spin":
                rec.latency = latency[rec.n]
    return records, summarize(records)


def summarize(records: list[BenchRecord]) -> dict:
    out = {}
    for method in dict.fromkeys(r.method for r in records):
        ok = [r for r in records if r.method == method and r.status == "ok"]
        slope, r2 = fit_exponent([r.n for r in ok], [r.step_time for r in ok])
        out[method] = {
            "method": method,
            "exponent": slope,
            "r2": r2,
            "memory": {str(r.n): r.peak_bytes for r in ok},
            "oom": [r.n for r in records if r.method == method and r.status == "oom"],
        }
    return out


def write_report(records: list[BenchRecord], summary: dict, out_dir: str | Path, plots: bool = False) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = [k for k in BenchRecord.__dataclass_fields__ if k != "phases"]
    csv_path = out_dir / "bench.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in records:
            row = asdict(r)
            row.pop("phases")
            w.writerow(row)
    json_path = out_dir / "bench_summary.json"
    json_path.write_text(json.dumps(summary, indent=2))
    written = [csv_path, json_path]
    if plots:
        for key, label in (("step_time", "seconds per step"), ("peak_bytes", "peak bytes per step")):
            path = out_dir / f"{key}.svg"
            path.write_text(loglog_svg(records, key, label))
            written.append(path)
    return written


def loglog_svg(records: list[BenchRecord], key: str, label: str, size=(480, 320)) -> str:
    """Minimal log-log line plot, one polyline per method."""
    ok = [r for r in records if r.status == "ok" and getattr(r, key) > 0]
    w, h = size
    pad = 50
    if not ok:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}"></svg>'
    xs = np.log([r.n for r in ok])
    ys = np.log([getattr(r, key) for r in ok])
    x0, x1 = xs.min(), max(xs.max(), xs.min() + 1e-9)
    y0, y1 = ys.min(), max(ys.max(), ys.min() + 1e-9)

    def px(x, y):
        return pad + (x - x0) / (x1 - x0) * (w - 2 * pad), h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad)

    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-size="11">',
             f'<text x="{w / 2}" y="{h - 10}" text-anchor="middle">n (log)</text>',
             f'<text x="12" y="{h / 2}" transform="rotate(-90 12 {h / 2})" text-anchor="middle">{label} (log)</text>']
    for i, method in enumerate(dict.fromkeys(r.method for r in ok)):
        pts = [px(math.log(r.n), math.log(getattr(r, key))) for r in ok if r.method == method]
        c = colours[i % len(colours)]
        parts.append(f'<polyline fill="none" stroke="{c}" points="' + " ".join(f"{a:.1f},{b:.1f}" for a, b in pts) + '"/>')
        parts.append(f'<text x="{pad + 5}" y="{pad / 2 + 14 * i}" fill="{c}">{method}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def _main(argv: list[str]) -> int:
    torch.set_num_threads(int(os.environ.get("SPIN_NUM_THREADS", "1")))
    kw = json.loads(argv[0])
    rec = run_point(**kw)
    print(json.dumps(asdict(rec)))
    return 0


if __name__ == "__main__":
    sys.exit(_main(sys.argv[1:]))
