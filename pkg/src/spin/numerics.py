"""Dense tensor operations used by the attention stack.

Tensors are ``torch.Tensor`` objects and reverse-mode gradients come from
torch autograd.  The operations here add shape validation, an optional
finiteness guard and a multiply-accumulate counter so that the cost of a
forward pass can be compared against closed-form complexity formulas.
``grad_check`` is a central-difference checker that does not use autograd
for its numeric side.
"""
from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from typing import Callable, Iterator, Sequence

import torch
import torch.nn.functional as F
from torch import nn

DTYPES = {"single": torch.float32, "double": torch.float64}
LAYER_NORM_EPS = 1e-5

_finite_checks = False


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def finite_checks(enabled: bool = True) -> Iterator[None]:
    """Raise ``NonFiniteError`` whenever an op in this module produces NaN/Inf."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def _guard(out: torch.Tensor, op: str) -> torch.Tensor:
    if _finite_checks and not torch.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


class FlopCounter:
    """Counts multiply-accumulates issued through :func:`matmul`.

    Counts are bucketed by the innermost active tag (see :meth:`tag`), so a
    forward pass can be broken down per sublayer.
    """

    def __init__(self) -> None:
        self.counts: dict[str, int] = defaultdict(int)
        self._tags: list[str] = []

    @contextlib.contextmanager
    def tag(self, name: str) -> Iterator[None]:
        self._tags.append(name)
        try:
            yield
        finally:
            self._tags.pop()

    def add(self, macs: int) -> None:
        key = "/".join(self._tags) if self._tags else "untagged"
        self.counts[key] += macs

    def total(self, prefix: str = "") -> int:
        return sum(v for k, v in self.counts.items() if k.startswith(prefix))


_counter: FlopCounter | None = None


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    global _counter
    prev = _counter
    _counter = FlopCounter()
    try:
        yield _counter
    finally:
        _counter = prev


@contextlib.contextmanager
def flop_tag(name: str) -> Iterator[None]:
    if _counter is None:
        yield
    else:
        with _counter.tag(name):
            yield


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product ``a @ b`` with broadcasting over leading extents."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    try:
        batch = torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError as exc:
        raise ValueError(
            f"matmul batch extents not broadcastable: {tuple(a.shape)} @ {tuple(b.shape)}"
        ) from exc
    if _counter is not None:
        m, p = a.shape[-2:]
        q = b.shape[-1]
        _counter.add(math.prod(batch) * m * p * q)
    return _guard(torch.matmul(a, b), "matmul")


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    ex = torch.exp(shifted)
    return _guard(ex / ex.sum(dim=dim, keepdim=True), "softmax")


def layer_norm(
    x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LAYER_NORM_EPS
) -> torch.Tensor:
    # zero-variance rows normalize to 0 and therefore map to ``bias``
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return _guard(centered / torch.sqrt(var + eps) * gain + bias, "layer_norm")


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


class Linear(nn.Module):
    """``x @ W + b`` with ``W`` stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, bias: bool = True) -> None:
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = nn.Parameter(torch.empty(n_in, n_out).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(n_out)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(nn.Module):
    def __init__(self, width: int) -> None:
        super().__init__()
        self.gain = nn.Parameter(torch.ones(width))
        self.bias = nn.Parameter(torch.zeros(width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.gain, self.bias)


class FeedForward(nn.Module):
    """Position-wise e -> 4e -> e network with GELU; dropout on the hidden layer."""

    def __init__(self, width: int, dropout: float = 0.0, expansion: int = 4) -> None:
        super().__init__()
        self.fc1 = Linear(width, expansion * width)
        self.fc2 = Linear(expansion * width, width)
        self.dropout = dropout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        hidden = gelu(self.fc1(x))
        hidden = F.dropout(hidden, self.dropout, self.training)
        return self.fc2(hidden)


def feed_forward(x: torch.Tensor, params: FeedForward) -> torch.Tensor:
    return params(x)


def grad_check(
    f: Callable[..., torch.Tensor],
    x: torch.Tensor | Sequence[torch.Tensor],
    step: float = 1e-5,
) -> float:
    """Largest relative disagreement between autograd and central differences.

    ``x`` is a tensor or a sequence of tensors; ``f(x)`` must return a
    scalar.  Tensors are perturbed in place, so module parameters can be
    checked by passing ``list(module.parameters())`` and a closure.  The
    relative error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    tensors = [x] if isinstance(x, torch.Tensor) else list(x)
    for t in tensors:
        if not t.requires_grad:
            t.requires_grad_(True)
        t.grad = None

    out = f(x)
    if out.numel() != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {tuple(out.shape)}")
    analytic = torch.autograd.grad(out, tensors, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, analytic):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            g_flat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = f(x).item()
                flat[i] = orig - step
                down = f(x).item()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                a = g_flat[i].item()
                denom = max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, abs(a - numeric) / denom)
    return worst
