"""Attribute schema shared by the data pipeline and the model."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"
INPUT = "input"
TARGET = "target"


@dataclass(frozen=True)
class Attribute:
    name: str
    kind: str
    role: str
    vocab: int | None = None
    levels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
            if self.vocab is None:
                object.__setattr__(self, "vocab", len(self.levels))
            elif self.vocab != len(self.levels):
                raise ValueError(f"attribute {self.name!r}: vocab size disagrees with levels")
        if self.kind not in (CATEGORICAL, CONTINUOUS):
            raise ValueError(f"attribute {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in (INPUT, TARGET):
            raise ValueError(f"attribute {self.name!r}: unknown role {self.role!r}")
        if self.kind == CATEGORICAL and (self.vocab is None or self.vocab < 2):
            raise ValueError(f"attribute {self.name!r}: categorical vocab must be >= 2")
        if self.kind == CONTINUOUS and self.vocab is not None:
            raise ValueError(f"attribute {self.name!r}: continuous attributes take no vocab")

    @property
    def categorical(self) -> bool:
        return self.kind == CATEGORICAL

    @property
    def out_width(self) -> int:
        return self.vocab if self.categorical else 1


@dataclass(frozen=True)
class Schema:
    attributes: tuple[Attribute, ...]

    def __post_init__(self) -> None:
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ValueError("duplicate attribute names in schema")
        if not self.attributes:
            raise ValueError("schema has no attributes")

    @property
    def d(self) -> int:
        return len(self.attributes)

    @property
    def input_idx(self) -> list[int]:
        return [i for i, a in enumerate(self.attributes) if a.role == INPUT]

    @property
    def target_idx(self) -> list[int]:
        return [i for i, a in enumerate(self.attributes) if a.role == TARGET]

    @property
    def p(self) -> int:
        return len(self.input_idx)

    @property
    def k(self) -> int:
        return len(self.target_idx)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def to_dict(self) -> dict:
        out = []
        for a in self.attributes:
            item = {"name": a.name, "kind": a.kind, "role": a.role}
            if a.levels is not None:
                item["vocab"] = list(a.levels)
            elif a.vocab is not None:
                item["vocab"] = a.vocab
            out.append(item)
        return {"attributes": out}

    @classmethod
    def from_dict(cls, doc: dict) -> "Schema":
        attrs = []
        for a in doc["attributes"]:
            a = dict(a)
            if isinstance(a.get("vocab"), list):
                a["levels"] = a.pop("vocab")
            attrs.append(Attribute(**a))
        return cls(tuple(attrs))

    def fingerprint(self) -> int:
        """Stable 64-bit digest of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        return cls.from_dict(json.loads(Path(path).read_text()))
