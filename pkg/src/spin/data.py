"""Datasets: mixed-type CSV tables, K-mer genotype tasks and a synthetic mosaic panel."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .schema import CATEGORICAL, CONTINUOUS, INPUT, TARGET, Attribute, Schema

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VAL: "val", TEST: "test"}


@dataclass
class TabularDataset:
    schema: Schema
    raw: np.ndarray  # (n, d) float64; categorical codes, NaN where missing
    observed: np.ndarray  # (n, d) bool
    split: np.ndarray  # (n,) int8 in {TRAIN, VAL, TEST}
    stats: dict[str, tuple[float, float]] = field(default_factory=dict)
    values: np.ndarray | None = None  # raw with continuous columns standardized

    def __post_init__(self) -> None:
        if self.values is None:
            self.standardize()

    @property
    def n(self) -> int:
        return self.raw.shape[0]

    def standardize(self) -> None:
        """Standardize continuous columns with statistics from the train split only."""
        train = self.split == TRAIN
        values = self.raw.copy()
        self.stats = {}
        for j, a in enumerate(self.schema.attributes):
            if a.kind != CONTINUOUS:
                continue
            col = self.raw[train & self.observed[:, j], j]
            mean = float(col.mean()) if col.size else 0.0
            std = float(col.std()) if col.size else 1.0
            std = std if std > 0 else 1.0
            self.stats[a.name] = (mean, std)
            values[:, j] = (self.raw[:, j] - mean) / std
        self.values = values

    def indices(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def rows(self, split: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.values[idx], self.observed[idx]

    def destandardize(self, attr: int, values: np.ndarray) -> np.ndarray:
        a = self.schema.attributes[attr]
        if a.kind != CONTINUOUS:
            return values
        mean, std = self.stats[a.name]
        return values * std + mean

    def with_split(self, split: np.ndarray) -> "TabularDataset":
        return TabularDataset(self.schema, self.raw, self.observed, np.asarray(split, dtype=np.int8))


def random_split(n: int, val_fraction: float, test_fraction: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    n_val = int(round(val_fraction * n))
    split = np.full(n, TRAIN, dtype=np.int8)
    split[perm[:n_test]] = TEST
    split[perm[n_test:n_test + n_val]] = VAL
    return split


def load_csv(
    path: str | Path,
    schema: Schema,
    val_fraction: float = 0.1,
    test_fraction: float = 0.1,
    seed: int = 0,
) -> TabularDataset:
    """Read a headed, comma-separated UTF-8 table conforming to ``schema``.

    Missing targets are an error; missing inputs are recorded as unobserved.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        unknown = [h for h in header if h not in schema.names]
        if unknown:
            raise ValueError(f"unknown column(s) {unknown} in {path}")
        missing = [nm for nm in schema.names if nm not in header]
        if missing:
            raise ValueError(f"column(s) {missing} declared in schema but absent from {path}")
        col_of = [header.index(nm) for nm in schema.names]
        raw_rows, obs_rows = [], []
        for line_no, record in enumerate(reader, start=2):
            if not record:
                continue
            vals, obs = [], []
            for a, c in zip(schema.attributes, col_of):
                text = record[c].strip()
                if text == "":
                    if a.role == TARGET:
                        raise ValueError(f"line {line_no}, column {a.name!r}: missing target value")
                    vals.append(math.nan)
                    obs.append(False)
                    continue
                vals.append(_parse_cell(a, text, line_no))
                obs.append(True)
            raw_rows.append(vals)
            obs_rows.append(obs)
    raw = np.array(raw_rows, dtype=np.float64).reshape(-1, schema.d)
    observed = np.array(obs_rows, dtype=bool).reshape(-1, schema.d)
    return TabularDataset(schema, raw, observed, random_split(len(raw), val_fraction, test_fraction, seed))


def _parse_cell(a: Attribute, text: str, line_no: int) -> float:
    if a.kind == CATEGORICAL:
        if a.levels is not None:
            if text not in a.levels:
                raise ValueError(f"line {line_no}, column {a.name!r}: {text!r} not in vocabulary")
            return float(a.levels.index(text))
        try:
            code = int(text)
        except ValueError:
            raise ValueError(f"line {line_no}, column {a.name!r}: cannot parse {text!r} as a category code") from None
        if not 0 <= code < a.vocab:
            raise ValueError(f"line {line_no}, column {a.name!r}: code {code} outside vocab {a.vocab}")
        return float(code)
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"line {line_no}, column {a.name!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise ValueError(f"line {line_no}, column {a.name!r}: non-finite value")
    return value


def write_csv(path: str | Path, schema: Schema, raw: np.ndarray, observed: np.ndarray | None = None) -> None:
    observed = np.ones(raw.shape, dtype=bool) if observed is None else observed
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        w.writerow(schema.names)
        for row, obs in zip(raw, observed):
            cells = []
            for a, v, o in zip(schema.attributes, row, obs):
                if not o:
                    cells.append("")
                elif a.kind == CATEGORICAL:
                    cells.append(a.levels[int(v)] if a.levels else str(int(v)))
                else:
                    cells.append(repr(float(v)))
            w.writerow(cells)


# ---------------------------------------------------------------- K-mers


def kmerize(bits, k: int) -> np.ndarray:
    """Non-overlapping K-blocks of a 0/1 sequence to integers; first site is the MSB."""
    bits = np.asarray(bits)
    if bits.shape[-1] % k:
        raise ValueError(f"sequence length {bits.shape[-1]} not divisible by K={k}")
    blocks = bits.reshape(*bits.shape[:-1], -1, k).astype(np.int64)
    weights = 1 << np.arange(k - 1, -1, -1, dtype=np.int64)
    return blocks @ weights


def dekmerize(tokens, k: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    shifts = np.arange(k - 1, -1, -1, dtype=np.int64)
    bits = (tokens[..., None] >> shifts) & 1
    return bits.reshape(*tokens.shape[:-1], -1).astype(np.uint8)


# ---------------------------------------------------------------- genomic panels


@dataclass
class GenomicPanel:
    haplotypes: np.ndarray  # (n, s) uint8
    marker: np.ndarray  # (s,) bool, True where the site is an observed input
    k: int = 5
    founders: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.haplotypes.shape[0]

    @property
    def sites(self) -> int:
        return self.haplotypes.shape[1]

    def save(self, path: str | Path) -> None:
        write_panel(path, self.haplotypes)
        write_panel(Path(str(path) + ".markers"), self.marker[None].astype(np.uint8))

    @classmethod
    def load(cls, path: str | Path, k: int = 5) -> "GenomicPanel":
        marker = read_panel(Path(str(path) + ".markers"))[0].astype(bool)
        return cls(read_panel(path), marker, k)


def write_panel(path: str | Path, haplotypes: np.ndarray) -> None:
    lines = ["".join("1" if b else "0" for b in row) for row in haplotypes]
    Path(path).write_text("\n".join(lines) + "\n")


def read_panel(path: str | Path) -> np.ndarray:
    rows = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if any(set(r) - {"0", "1"} for r in rows):
        raise ValueError(f"{path}: panel lines may only contain '0' and '1'")
    if len({len(r) for r in rows}) > 1:
        raise ValueError(f"{path}: ragged panel")
    return np.array([[c == "1" for c in r] for r in rows], dtype=np.uint8)


@dataclass
class MosaicGenConfig:
    founders: int = 16
    sites: int = 250
    allele_freq: float | Sequence[float] = 0.5
    rho: float = 0.02
    mu: float = 0.001
    n: int = 2400
    seed: int = 7
    n_inputs: int = 150
    layout: str = "interleaved"
    k: int = 5

    def __post_init__(self) -> None:
        if self.founders < 2:
            raise ValueError("need at least 2 founders")
        freq = np.asarray(self.allele_freq, dtype=float)
        for name, v in (("rho", self.rho), ("mu", self.mu)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if ((freq < 0) | (freq > 1)).any():
            raise ValueError("allele frequencies outside [0, 1]")


def marker_layout(sites: int, n_inputs: int, layout: str) -> np.ndarray:
    """Which sites are array markers (inputs); the rest are imputation targets."""
    if not 0 < n_inputs < sites:
        raise ValueError(f"n_inputs={n_inputs} must lie strictly between 0 and {sites}")
    marker = np.zeros(sites, dtype=bool)
    if layout == "interleaved":
        marker[np.round(np.linspace(0, sites - 1, n_inputs)).astype(int)] = True
    elif layout == "flanking":
        left = n_inputs // 2
        marker[:left] = True
        marker[sites - (n_inputs - left):] = True
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return marker


def generate_mosaic(cfg: MosaicGenConfig, founders: np.ndarray | None = None) -> GenomicPanel:
    """Founder haplotypes, then individuals copying founders with random switches and mutation.

    ``founders`` (F, s) replaces the sampled founder panel when given.
    """
    rng = np.random.default_rng(cfg.seed)
    freq = np.broadcast_to(np.asarray(cfg.allele_freq, dtype=float), (cfg.sites,))
    sampled = (rng.random((cfg.founders, cfg.sites)) < freq).astype(np.uint8)
    if founders is None:
        founders = sampled
    elif founders.shape != sampled.shape:
        raise ValueError(f"founder panel {founders.shape} does not match ({cfg.founders}, {cfg.sites})")
    founders = np.asarray(founders, dtype=np.uint8)
    switch = rng.random((cfg.n, cfg.sites)) < cfg.rho
    switch[:, 0] = True
    pick = rng.integers(cfg.founders, size=(cfg.n, cfg.sites))
    last = np.maximum.accumulate(np.where(switch, np.arange(cfg.sites), 0), axis=1)
    origin = np.take_along_axis(pick, last, axis=1)
    hap = founders[origin, np.arange(cfg.sites)]
    flips = rng.random((cfg.n, cfg.sites)) < cfg.mu
    hap = hap ^ flips.astype(np.uint8)
    return GenomicPanel(hap, marker_layout(cfg.sites, cfg.n_inputs, cfg.layout), cfg.k, founders)


@dataclass
class ImputationTask:
    dataset: TabularDataset
    input_sites: np.ndarray
    target_sites: np.ndarray
    k: int

    def target_alleles(self, split: int) -> np.ndarray:
        """(b, n_targets) true alleles of the rows in ``split``."""
        idx = self.dataset.indices(split)
        codes = self.dataset.raw[idx][:, self.dataset.schema.target_idx]
        return dekmerize(codes.astype(np.int64), self.k)

    def decode(self, estimates: np.ndarray) -> np.ndarray:
        """(b, d) per-attribute class estimates -> (b, n_targets) alleles."""
        codes = np.asarray(estimates)[:, self.dataset.schema.target_idx]
        return dekmerize(codes.astype(np.int64), self.k)


def make_imputation_task(
    panel: GenomicPanel,
    n_inputs: int = 150,
    n_targets: int = 100,
    split: np.ndarray | None = None,
    counts: tuple[int, int, int] | None = None,
) -> ImputationTask:
    """K-mer tabular task: the first ``n_inputs`` marker sites and ``n_targets`` other sites.

    Rows are assigned to splits by the per-row ``split`` array, or by
    (n_train, n_val, n_test) ``counts`` in row order; default all train.
    """
    k = panel.k
    markers = np.flatnonzero(panel.marker)
    others = np.flatnonzero(~panel.marker)
    if n_inputs > len(markers) or n_targets > len(others):
        raise ValueError(
            f"window needs {n_inputs} input and {n_targets} target sites; "
            f"panel has {len(markers)} and {len(others)}"
        )
    if n_inputs % k or n_targets % k:
        raise ValueError(f"window sizes must be divisible by K={k}")
    in_sites, tg_sites = markers[:n_inputs], others[:n_targets]
    vocab = 2 ** k
    attrs = [Attribute(f"x{i:03d}", CATEGORICAL, INPUT, vocab) for i in range(n_inputs // k)]
    attrs += [Attribute(f"y{i:03d}", CATEGORICAL, TARGET, vocab) for i in range(n_targets // k)]
    schema = Schema(tuple(attrs))
    raw = np.concatenate(
        [kmerize(panel.haplotypes[:, in_sites], k), kmerize(panel.haplotypes[:, tg_sites], k)], axis=1
    ).astype(np.float64)
    n = panel.n
    if counts is not None:
        if sum(counts) != n:
            raise ValueError(f"split counts {counts} do not sum to {n} rows")
        split_arr = np.repeat(np.array([TRAIN, VAL, TEST], dtype=np.int8), counts)
    elif split is not None:
        split_arr = np.asarray(split, dtype=np.int8)
    else:
        split_arr = np.full(n, TRAIN, dtype=np.int8)
    ds = TabularDataset(schema, raw, np.ones_like(raw, dtype=bool), split_arr)
    return ImputationTask(ds, in_sites, tg_sites, k)


def mosaic_task(
    founders: int = 16,
    sites: int = 250,
    rho: float = 0.02,
    mu: float = 0.001,
    n_train: int = 2000,
    n_val: int = 200,
    n_test: int = 200,
    seed: int = 7,
    kmer: int = 5,
    n_inputs: int = 150,
    n_targets: int = 100,
    layout: str = "interleaved",
    allele_freq: float = 0.5,
) -> tuple[GenomicPanel, ImputationTask]:
    cfg = MosaicGenConfig(
        founders, sites, allele_freq, rho, mu, n_train + n_val + n_test, seed, n_inputs, layout, kmer
    )
    panel = generate_mosaic(cfg)
    return panel, make_imputation_task(panel, n_inputs, n_targets, counts=(n_train, n_val, n_test))


def breast_cancer_dataset(seed: int = 0) -> TabularDataset:
    """UCI Breast Cancer (Wisconsin diagnostic) as bundled with scikit-learn."""
    from sklearn.datasets import load_breast_cancer

    bunch = load_breast_cancer()
    attrs = [Attribute(f"f{i:02d}", CONTINUOUS, INPUT) for i in range(bunch.data.shape[1])]
    attrs.append(Attribute("diagnosis", CATEGORICAL, TARGET, levels=tuple(bunch.target_names)))
    raw = np.concatenate([bunch.data, bunch.target[:, None]], axis=1).astype(np.float64)
    return TabularDataset(Schema(tuple(attrs)), raw, np.ones_like(raw, dtype=bool), random_split(len(raw), 0.1, 0.1, seed))


def cv_splits(ds: TabularDataset, folds: int, seed: int, val_fraction: float = 0.1) -> Iterator[TabularDataset]:
    """K-fold test folds; a random ``val_fraction`` of the remainder becomes validation."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.n)
    for chunk in np.array_split(perm, folds):
        split = np.full(ds.n, TRAIN, dtype=np.int8)
        split[chunk] = TEST
        rest = np.flatnonzero(split == TRAIN)
        split[rng.choice(rest, int(round(val_fraction * len(rest))), replace=False)] = VAL
        yield ds.with_split(split)


# ---------------------------------------------------------------- slicing


@dataclass
class Slice:
    context: np.ndarray
    query: np.ndarray

    @property
    def rows(self) -> np.ndarray:
        return np.concatenate([self.context, self.query])


def slice_batches(
    rows: int | np.ndarray,
    slice_size: int,
    label_mask: float,
    rng: np.random.Generator | int | None,
) -> list[Slice]:
    """Shuffle and partition rows into slices, each split into context and query rows.

    ``slice_size >= len(rows)`` gives a single slice (no batching).  A
    trailing slice with fewer than 2 rows is merged into its predecessor.
    Each slice holds ``round(label_mask * size)`` query rows, at least one,
    and at least one context row.
    """
    if slice_size < 2:
        raise ValueError("slice_size must be >= 2")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    idx = np.arange(rows) if np.isscalar(rows) else np.asarray(rows)
    if len(idx) < 2:
        raise ValueError("need at least 2 rows to form a context/query slice")
    idx = idx[rng.permutation(len(idx))]
    chunks = [idx[i:i + slice_size] for i in range(0, len(idx), slice_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    out = []
    for chunk in chunks:
        n_query = min(max(int(round(label_mask * len(chunk))), 1), len(chunk) - 1)
        out.append(Slice(chunk[n_query:], chunk[:n_query]))
    return out
