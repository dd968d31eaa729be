"""Parameter counts, by walking the module and in closed form."""
from __future__ import annotations

from torch import nn

from ..config import ModelConfig
from ..schema import Schema


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def inference_param_count(model) -> int:
    """Scalars still needed once the training set is replaced by its encoding."""
    return sum(p.numel() for p in model.inference_parameters())


def mab_params(w: int) -> int:
    # two layer norms (4w), four bias-free projections (4w^2), FF w->4w->w with biases
    return 4 * w + 4 * w * w + 8 * w * w + 5 * w


def embedding_params(schema: Schema, e: int) -> int:
    vocab = sum(a.vocab for a in schema.attributes if a.categorical)
    n_cont = sum(1 for a in schema.attributes if not a.categorical)
    return vocab * e + 2 * n_cont * e + schema.d * e + e


def head_params(schema: Schema, e: int) -> int:
    return sum(a.out_width * (e + 1) for a in schema.attributes)


def encoder_params_formula(schema: Schema, cfg: ModelConfig) -> int:
    e, f = cfg.e, cfg.f
    total = f * schema.d + cfg.h * f * e
    for i in range(cfg.n_layers):
        total += mab_params(e) if cfg.xaba else 0
        total += mab_params(f * e) if cfg.xabd else 0
        if cfg.abla:
            total += mab_params(e) * (2 if i < cfg.n_layers - 1 else 1)
    return total


def inference_params_formula(schema: Schema, cfg: ModelConfig) -> int:
    e = cfg.e
    return embedding_params(schema, e) + 2 * mab_params(e) + 2 * e + head_params(schema, e)


def total_params_formula(schema: Schema, cfg: ModelConfig) -> int:
    return encoder_params_formula(schema, cfg) + inference_params_formula(schema, cfg)
