"""Closed-form multiply-accumulate counts for the encoder and predictor."""
from __future__ import annotations

from ..config import ModelConfig


def mab_macs(batch: int, a: int, c: int, w: int) -> int:
    """One MAB on ``batch`` independent sets: a queries of width w against c keys.

    Projections Q, O (2aw^2) and K, V (2cw^2), scores and mixing (2acw),
    and the 4x feed-forward (8aw^2).
    """
    return batch * (10 * a * w * w + 2 * c * w * w + 2 * a * c * w)


def layer_macs(cfg: ModelConfig, n: int, d: int, last: bool) -> dict[str, int]:
    e, f, h = cfg.e, cfg.f, cfg.h
    out = {}
    if cfg.xaba:
        out["xaba"] = mab_macs(n, f, d, e)  # O(n d f e)
    if cfg.xabd:
        out["xabd"] = mab_macs(1, h, n, f * e)  # O(n h f e) for the key side
    if cfg.abla:
        if not last:
            out["abla_a"] = mab_macs(n, f, f, e)
        out["abla_d"] = mab_macs(h, f, f, e)
    return out


def encode_macs(cfg: ModelConfig, n: int, d: int) -> dict[str, int]:
    out = {"init_h_a": n * cfg.f * d * cfg.e}
    for i in range(cfg.n_layers):
        for tag, v in layer_macs(cfg, n, d, last=i == cfg.n_layers - 1).items():
            out[f"layer{i}/{tag}"] = v
    return out


def predict_macs(cfg: ModelConfig, b: int, d: int, out_width: int) -> int:
    """``out_width`` is the summed head width over attributes.

    The h*f encoding tokens are shared by all queries, so their key and value
    projections are paid once rather than per row.
    """
    e, m = cfg.e, cfg.h * cfg.f
    cross = b * (10 * d * e * e + 2 * d * m * e) + 2 * m * e * e
    return mab_macs(b, d, d, e) + cross + b * e * out_width
