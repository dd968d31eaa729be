"""Run configuration: dataclasses, defaults, dotted overrides and validation."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    def __init__(self, errors: list[str]) -> None:
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


@dataclass
class ModelConfig:
    e: int = 16
    depth: int = 4
    heads: int = 1
    h: int = 10
    f: int = 10
    dropout: float = 0.1
    xaba: bool = True
    xabd: bool = True
    abla: bool = True

    @property
    def n_layers(self) -> int:
        # one layer = XABA + XABD (+ ABLA); each of XABA and XABD counts as one depth unit
        return max(1, (self.depth + 1) // 2)


@dataclass
class TrainConfig:
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    clip_norm: float = 1.0
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    epochs: int = 300
    patience: int = 30
    slice_size: int = 256
    label_mask: float = 0.5
    attr_mask: float = 0.3
    lambda_start: float = 0.5
    lambda_floor: float = 0.0
    lambda_shape: str = "linear"
    eval_every: int = 1


@dataclass
class DataConfig:
    kind: str = "mosaic"
    seed: int = 7  # data generation and split seed, separate from the training seed
    path: str | None = None
    schema: str | None = None
    founders: int = 16
    sites: int = 250
    rho: float = 0.02
    mu: float = 0.001
    allele_freq: float = 0.5
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    kmer: int = 5
    n_inputs: int = 150
    n_targets: int = 100
    layout: str = "interleaved"
    val_fraction: float = 0.1
    test_fraction: float = 0.1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    precision: str = "single"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **dotted: Any) -> "RunConfig":
        doc = self.to_dict()
        for key, value in dotted.items():
            _set_dotted(doc, key.replace("__", "."), value)
        return validate_config(doc)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError([f"override {text!r} is not of the form key=value"])
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _set_dotted(doc: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError([f"override {key!r} descends into a non-section"])
    node[parts[-1]] = value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    doc = json.loads(json.dumps(doc))
    seen: dict[str, Any] = {}
    errors = []
    for text in overrides:
        key, value = parse_override(text)
        if key in seen and seen[key] != value:
            errors.append(f"conflicting overrides for {key}: {seen[key]!r} vs {value!r}")
            continue
        seen[key] = value
        _set_dotted(doc, key, value)
    if errors:
        raise ConfigError(errors)
    return doc


def _build(cls, doc: dict, prefix: str, errors: list[str]):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        if key not in known:
            errors.append(f"unknown key {prefix}{key}")
            continue
        default = getattr(cls(), key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                errors.append(f"{prefix}{key} must be a boolean, got {value!r}")
                continue
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                errors.append(f"{prefix}{key} must be an integer, got {value!r}")
                continue
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                errors.append(f"{prefix}{key} must be a number, got {value!r}")
                continue
            value = float(value)
        elif isinstance(default, tuple):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def validate_config(document: dict | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Fill defaults, apply overrides and range-check; all violations are raised together."""
    doc = apply_overrides(document or {}, overrides or [])
    errors: list[str] = []
    sections = {}
    for name, cls in _SECTIONS.items():
        sub = doc.get(name, {})
        if not isinstance(sub, dict):
            errors.append(f"section {name} must be an object")
            sub = {}
        sections[name] = _build(cls, sub, f"{name}.", errors)
    for key in doc:
        if key not in _SECTIONS and key not in ("seed", "precision"):
            errors.append(f"unknown key {key}")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        errors.append(f"seed must be an integer, got {seed!r}")
        seed = 0
    precision = doc.get("precision", "single")
    cfg = RunConfig(sections["model"], sections["train"], sections["data"], seed, precision)
    errors.extend(_range_errors(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def _range_errors(cfg: RunConfig) -> list[str]:
    m, t, d = cfg.model, cfg.train, cfg.data
    errs = []
    for name in ("e", "depth", "heads", "h", "f"):
        if getattr(m, name) < 1:
            errs.append(f"model.{name} must be >= 1")
    if m.heads >= 1 and m.e % m.heads:
        errs.append(f"model.e={m.e} is not divisible by model.heads={m.heads}")
    if not 0.0 <= m.dropout <= 1.0:
        errs.append(f"model.dropout={m.dropout} outside [0, 1]")
    if t.optimizer not in ("adamw", "lamb-lookahead"):
        errs.append(f"train.optimizer={t.optimizer!r} not in {{adamw, lamb-lookahead}}")
    if t.lr <= 0:
        errs.append("train.lr must be positive")
    if t.weight_decay < 0:
        errs.append("train.weight_decay must be >= 0")
    if t.clip_norm <= 0:
        errs.append("train.clip_norm must be positive")
    if t.lookahead_k < 1 or not 0.0 < t.lookahead_alpha <= 1.0:
        errs.append("train.lookahead_k >= 1 and train.lookahead_alpha in (0, 1] required")
    if t.epochs < 1 or t.patience < 1:
        errs.append("train.epochs and train.patience must be >= 1")
    if t.slice_size < 2:
        errs.append("train.slice_size must be >= 2")
    if not 0.0 <= t.label_mask < 1.0:
        errs.append(f"train.label_mask={t.label_mask} outside [0, 1)")
    if not 0.0 <= t.attr_mask <= 1.0:
        errs.append(f"train.attr_mask={t.attr_mask} outside [0, 1]")
    if not 0.0 <= t.lambda_floor <= t.lambda_start <= 1.0:
        errs.append("need 0 <= train.lambda_floor <= train.lambda_start <= 1")
    if t.lambda_shape not in ("linear", "cosine"):
        errs.append(f"train.lambda_shape={t.lambda_shape!r} not in {{linear, cosine}}")
    if d.kind not in ("mosaic", "csv", "breast_cancer"):
        errs.append(f"data.kind={d.kind!r} not in {{mosaic, csv, breast_cancer}}")
    if d.founders < 2:
        errs.append("data.founders must be >= 2")
    for name in ("rho", "mu", "allele_freq"):
        if not 0.0 <= getattr(d, name) <= 1.0:
            errs.append(f"data.{name} outside [0, 1]")
    if d.kmer < 1:
        errs.append("data.kmer must be >= 1")
    if d.layout not in ("interleaved", "flanking"):
        errs.append(f"data.layout={d.layout!r} not in {{interleaved, flanking}}")
    if cfg.precision not in ("single", "double"):
        errs.append(f"precision={cfg.precision!r} not in {{single, double}}")
    return errs


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    doc = json.loads(Path(path).read_text()) if path else {}
    return validate_config(doc, overrides)
