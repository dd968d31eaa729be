"""SPIN: attribute embedding, inducing-point encoder and cross-attention predictor.

Shapes: a batch of n datapoints with d attributes embeds to D (n, d, e).
The encoder keeps a per-datapoint latent H_A (n, f, e) and the inducing
points H_D (h, f, e); the final H_D is the dataset encoding consumed by the
predictor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .attention import MAB
from .config import ModelConfig
from .numerics import LayerNorm, flop_tag, matmul
from .schema import Schema


@dataclass
class EmbeddedBatch:
    D: torch.Tensor  # (n, d, e)
    masked: torch.Tensor  # (n, d) bool
    gold: torch.Tensor  # (n, d) raw values; categorical codes as floats


@dataclass
class HeadOutput:
    attr_idx: torch.Tensor  # (m,) attribute positions served by this head group
    out: torch.Tensor  # (b, m, v) logits, or (b, m) for continuous
    categorical: bool


@dataclass
class Prediction:
    groups: list[HeadOutput]
    d: int

    def logits(self, attr: int) -> torch.Tensor:
        for g in self.groups:
            hit = (g.attr_idx == attr).nonzero()
            if len(hit):
                return g.out[:, hit[0, 0]]
        raise KeyError(attr)

    def point_estimates(self) -> torch.Tensor:
        """(b, d) argmax class for categorical positions, value for continuous."""
        b = self.groups[0].out.shape[0]
        dtype = next(g.out.dtype for g in self.groups)
        est = torch.zeros(b, self.d, dtype=dtype)
        for g in self.groups:
            vals = g.out.argmax(-1).to(dtype) if g.categorical else g.out
            est[:, g.attr_idx] = vals
        return est


def unfold(t: torch.Tensor) -> torch.Tensor:
    """(a, f, e) -> (1, a, f*e), each datapoint's slots concatenated slot-major."""
    a, f, e = t.shape
    return t.reshape(1, a, f * e)


def fold(t: torch.Tensor, f: int) -> torch.Tensor:
    """(1, a, f*e) -> (a, f, e); inverse of :func:`unfold`."""
    if t.dim() != 3 or t.shape[0] != 1 or t.shape[2] % f:
        raise ValueError(f"cannot fold {tuple(t.shape)} into {f} slots")
    return t.reshape(t.shape[1], f, t.shape[2] // f)


def init_h_a(D: torch.Tensor, P: torch.Tensor) -> torch.Tensor:
    """H_A[i] = P @ D[i] for every datapoint i."""
    if P.shape[0] > P.shape[1]:
        raise ValueError(f"projection {tuple(P.shape)} must have f <= d")
    return matmul(P, D)


def _trunc_normal(shape, std: float) -> torch.Tensor:
    t = torch.empty(shape)
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)
    return t


class AttributeEmbedding(nn.Module):
    def __init__(self, schema: Schema, e: int) -> None:
        super().__init__()
        self.schema = schema
        self.e = e
        attrs = schema.attributes
        self.cat_cols = [i for i, a in enumerate(attrs) if a.categorical]
        self.cont_cols = [i for i, a in enumerate(attrs) if not a.categorical]
        vocab = [attrs[i].vocab for i in self.cat_cols]
        offsets = np.concatenate([[0], np.cumsum(vocab)[:-1]]).astype(np.int64) if vocab else []
        self.register_buffer("cat_offsets", torch.as_tensor(offsets, dtype=torch.long), persistent=False)
        self.register_buffer("cat_vocab", torch.as_tensor(vocab, dtype=torch.long), persistent=False)
        order = self.cat_cols + self.cont_cols
        self.register_buffer("inv_order", torch.as_tensor(np.argsort(order), dtype=torch.long), persistent=False)
        std = e ** -0.5
        self.table = nn.Parameter(torch.randn(int(sum(vocab)), e) * std)
        self.cont_w = nn.Parameter(torch.randn(len(self.cont_cols), e) * std)
        self.cont_b = nn.Parameter(torch.zeros(len(self.cont_cols), e))
        self.attr = nn.Parameter(torch.randn(schema.d, e) * std)
        self.mask = nn.Parameter(torch.randn(e) * std)

    def forward(self, values: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        if values.dim() != 2 or values.shape[1] != self.schema.d:
            raise ValueError(f"expected (n, {self.schema.d}) values, got {tuple(values.shape)}")
        dtype = self.attr.dtype
        values = torch.where(masked, torch.zeros_like(values), values)
        parts = []
        if self.cat_cols:
            codes = values[:, self.cat_cols]
            idx = codes.long()
            if (codes != idx).any() or (idx < 0).any() or (idx >= self.cat_vocab).any():
                bad = ((codes != idx) | (idx < 0) | (idx >= self.cat_vocab)).nonzero()[0].tolist()
                name = self.schema.attributes[self.cat_cols[bad[1]]].name
                raise ValueError(f"row {bad[0]}: value {codes[bad[0], bad[1]].item()} out of vocab for {name!r}")
            parts.append(self.table[idx + self.cat_offsets])
        if self.cont_cols:
            cont = values[:, self.cont_cols].to(dtype)
            if not torch.isfinite(cont).all():
                raise ValueError("non-finite continuous value in an unmasked position")
            parts.append(cont[..., None] * self.cont_w + self.cont_b)
        content = torch.cat(parts, dim=1)[:, self.inv_order]
        m = masked[..., None].to(dtype)
        return content * (1 - m) + m * self.mask + self.attr


class OutputHead(nn.Module):
    """Per-attribute linear maps e -> vocab (or e -> 1), grouped by output width."""

    def __init__(self, schema: Schema, e: int) -> None:
        super().__init__()
        self.d = schema.d
        groups: dict[tuple[bool, int], list[int]] = {}
        for i, a in enumerate(schema.attributes):
            groups.setdefault((a.categorical, a.out_width), []).append(i)
        self.keys = sorted(groups, key=lambda k: (not k[0], k[1]))
        bound = e ** -0.5
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for key in self.keys:
            idx = groups[key]
            self.register_buffer(f"idx{len(self.weights)}", torch.tensor(idx), persistent=False)
            self.weights.append(nn.Parameter(torch.empty(len(idx), e, key[1]).uniform_(-bound, bound)))
            self.biases.append(nn.Parameter(torch.zeros(len(idx), key[1])))

    def forward(self, x: torch.Tensor) -> Prediction:
        out = []
        for j, (categorical, _) in enumerate(self.keys):
            idx = getattr(self, f"idx{j}")
            # (m, b, 1, e) @ (m, 1, e, v) -> (m, b, 1, v)
            z = matmul(x[:, idx].transpose(0, 1)[:, :, None, :], self.weights[j][:, None])
            z = z[:, :, 0].transpose(0, 1) + self.biases[j]
            out.append(HeadOutput(idx, z if categorical else z[..., 0], categorical))
        return Prediction(out, self.d)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, abla_on_a: bool) -> None:
        super().__init__()
        e, f = cfg.e, cfg.f
        self.f = f
        self.xaba = MAB(e, cfg.heads, cfg.dropout) if cfg.xaba else None
        self.xabd = MAB(f * e, cfg.heads, cfg.dropout) if cfg.xabd else None
        self.abla_a = MAB(e, cfg.heads, cfg.dropout) if cfg.abla and abla_on_a else None
        self.abla_d = MAB(e, cfg.heads, cfg.dropout) if cfg.abla else None

    def forward(self, h_a: torch.Tensor, h_d: torch.Tensor, D: torch.Tensor):
        if self.xaba is not None:
            with flop_tag("xaba"):
                h_a = xaba(h_a, D, self.xaba)
        if self.xabd is not None:
            with flop_tag("xabd"):
                h_d = xabd(h_d, h_a, self.xabd)
        if self.abla_a is not None:
            with flop_tag("abla_a"):
                h_a = abla(h_a, self.abla_a)
        if self.abla_d is not None:
            with flop_tag("abla_d"):
                h_d = abla(h_d, self.abla_d)
        return h_a, h_d


def xaba(h_a: torch.Tensor, D: torch.Tensor, block: MAB) -> torch.Tensor:
    """Per-datapoint cross-attention: f latent slots query the d attribute embeddings."""
    if h_a.shape[0] != D.shape[0] or h_a.shape[2] != D.shape[2]:
        raise ValueError(f"XABA extent mismatch: H_A {tuple(h_a.shape)} vs D {tuple(D.shape)}")
    return block(h_a, D)


def xabd(h_d: torch.Tensor, h_a: torch.Tensor, block: MAB) -> torch.Tensor:
    """Inducing points attend over all datapoints, each flattened to one (f*e) token."""
    if h_d.shape[1:] != h_a.shape[1:]:
        raise ValueError(f"XABD extent mismatch: H_D {tuple(h_d.shape)} vs H_A {tuple(h_a.shape)}")
    return fold(block(unfold(h_d), unfold(h_a)), h_d.shape[1])


def abla(t: torch.Tensor, block: MAB) -> torch.Tensor:
    return block(t, t)


class Predictor(nn.Module):
    """Query rows mix their own attributes, cross-attend to the flattened encoding, then project."""

    def __init__(self, schema: Schema, cfg: ModelConfig) -> None:
        super().__init__()
        self.self_attn = MAB(cfg.e, cfg.heads, cfg.dropout)
        self.cross = MAB(cfg.e, cfg.heads, cfg.dropout)
        self.norm = LayerNorm(cfg.e)
        self.head = OutputHead(schema, cfg.e)

    def forward(self, x_query: torch.Tensor, h_d: torch.Tensor) -> Prediction:
        tokens = h_d.reshape(1, -1, h_d.shape[-1])  # (1, h*f, e) shared by every query row
        with flop_tag("predict"):
            x = self.self_attn(x_query, x_query)
            x = self.cross(x, tokens)
            return self.head(self.norm(x))


class SpinModel(nn.Module):
    def __init__(self, schema: Schema, cfg: ModelConfig) -> None:
        super().__init__()
        if cfg.f > schema.d:
            raise ValueError(f"f={cfg.f} exceeds attribute count d={schema.d}")
        if (cfg.f * cfg.e) % cfg.heads:
            raise ValueError(f"f*e={cfg.f * cfg.e} not divisible by {cfg.heads} heads")
        self.schema = schema
        self.cfg = cfg
        self.embedding = AttributeEmbedding(schema, cfg.e)
        self.proj = nn.Parameter(torch.randn(cfg.f, schema.d) / schema.d ** 0.5)
        self.h_d0 = nn.Parameter(_trunc_normal((cfg.h, cfg.f, cfg.e), 0.02))
        n = cfg.n_layers
        self.layers = nn.ModuleList(EncoderLayer(cfg, abla_on_a=i < n - 1) for i in range(n))
        self.predictor = Predictor(schema, cfg)

    # encoder-only parameters are replaced by the exported encoding at inference
    def encoder_parameters(self):
        yield self.proj
        yield self.h_d0
        yield from self.layers.parameters()

    def inference_parameters(self):
        yield from self.embedding.parameters()
        yield from self.predictor.parameters()

    @property
    def dtype(self) -> torch.dtype:
        return self.h_d0.dtype

    def embed(self, values, masked) -> EmbeddedBatch:
        values = torch.as_tensor(values)
        masked = torch.as_tensor(masked, dtype=torch.bool)
        if values.dtype != self.dtype:
            values = values.to(self.dtype)
        with flop_tag("embed"):
            D = self.embedding(values, masked)
        return EmbeddedBatch(D, masked, values)

    def encode(self, D: torch.Tensor) -> torch.Tensor:
        if D.dim() != 3 or D.shape[0] == 0:
            raise ValueError(f"cannot encode an empty training set (D shape {tuple(D.shape)})")
        with flop_tag("init_h_a"):
            h_a = init_h_a(D, self.proj)
        h_d = self.h_d0
        for i, layer in enumerate(self.layers):
            with flop_tag(f"layer{i}"):
                h_a, h_d = layer(h_a, h_d, D)
        return h_d

    def predict(self, x_query: torch.Tensor, h_d) -> Prediction:
        from .encoding import EncodedDataset

        if isinstance(h_d, EncodedDataset):
            h_d.check_compatible(self)
            h_d = h_d.tensor(self.dtype)
        if h_d.shape != (self.cfg.h, self.cfg.f, self.cfg.e):
            raise ValueError(f"encoding shape {tuple(h_d.shape)} does not match the model")
        return self.predictor(x_query, h_d)

    def forward(self, context: EmbeddedBatch, query: EmbeddedBatch) -> Prediction:
        return self.predict(query.D, self.encode(context.D))

    @torch.no_grad()
    def encode_rows(self, values, masked) -> torch.Tensor:
        return self.encode(self.embed(values, masked).D)

    @torch.no_grad()
    def predict_rows(self, values, masked, h_d) -> Prediction:
        return self.predict(self.embed(values, masked).D, h_d)
