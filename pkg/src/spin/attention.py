"""Dot-product attention, multi-head attention and the pre-norm attention block."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import FeedForward, LayerNorm, matmul, softmax


def att(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    dropout: float = 0.0,
    training: bool = False,
) -> torch.Tensor:
    """softmax(Q K^T / sqrt(e_q)) V over the key axis; leading extents broadcast."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(
            f"query/key widths differ: Q {tuple(q.shape)} vs K {tuple(k.shape)}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(
            f"key/value lengths differ: K {tuple(k.shape)} vs V {tuple(v.shape)}"
        )
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    weights = softmax(scores, dim=-1)
    weights = F.dropout(weights, dropout, training)
    return matmul(weights, v)


class MultiHeadAttention(nn.Module):
    """Multi-head attention with e_o = e_q.

    The per-head projections W^Q_j, W^K_j, W^V_j are the column blocks
    ``[:, j*e_qh:(j+1)*e_qh]`` of the stored (width, width) matrices.
    """

    def __init__(self, width: int, heads: int = 1, dropout: float = 0.0) -> None:
        super().__init__()
        if heads < 1 or width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.dropout = dropout
        bound = 1.0 / math.sqrt(width)
        self.w_q = nn.Parameter(torch.empty(width, width).uniform_(-bound, bound))
        self.w_k = nn.Parameter(torch.empty(width, width).uniform_(-bound, bound))
        self.w_v = nn.Parameter(torch.empty(width, width).uniform_(-bound, bound))
        self.w_o = nn.Parameter(torch.empty(width, width).uniform_(-bound, bound))

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.width // self.heads).transpose(-2, -3)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        for name, t in (("Q", q), ("K", k), ("V", v)):
            if t.shape[-1] != self.width:
                raise ValueError(f"{name} width {t.shape[-1]} != attention width {self.width}")
        heads = att(
            self._split(matmul(q, self.w_q)),
            self._split(matmul(k, self.w_k)),
            self._split(matmul(v, self.w_v)),
            self.dropout,
            self.training,
        )
        *lead, _, n, _ = heads.shape
        merged = heads.transpose(-2, -3).reshape(*lead, n, self.width)
        return matmul(merged, self.w_o)


def mha(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, params: MultiHeadAttention) -> torch.Tensor:
    return params(q, k, v)


class MAB(nn.Module):
    """Pre-norm attention block.

    O = X + MHA(LN(X), H, H);  MAB(X, H) = O + FF(LN(O)).
    H enters the attention un-normalized.
    """

    def __init__(self, width: int, heads: int = 1, dropout: float = 0.0) -> None:
        super().__init__()
        self.width = width
        self.norm_q = LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads, dropout)
        self.norm_ff = LayerNorm(width)
        self.ff = FeedForward(width, dropout)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != h.shape[-1]:
            raise ValueError(
                f"MAB width mismatch: X {tuple(x.shape)} vs H {tuple(h.shape)}"
            )
        o = x + self.attn(self.norm_q(x), h, h)
        return o + self.ff(self.norm_ff(o))

    def zero_sublayers(self) -> None:
        """Zero the attention and feed-forward weights, leaving the residual path."""
        with torch.no_grad():
            for p in (*self.attn.parameters(), *self.ff.parameters()):
                p.zero_()


def mab(x: torch.Tensor, h: torch.Tensor, params: MAB) -> torch.Tensor:
    return params(x, h)
