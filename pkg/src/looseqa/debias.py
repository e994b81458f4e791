"""Ensemble debiasing: fuse main and bias-branch logits for training,
drop or subtract the bias branch at inference.

Combiner outputs are either logits (rubi, counterfactual) or unnormalized
log probabilities (bias product, learned-mixin); in both cases the training
loss is cross-entropy on their softmax, so the same loss code serves all.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .autodiff import (
    ConfigError,
    DimensionError,
    Tensor,
    add,
    detach,
    log,
    log_softmax,
    mul,
    sigmoid,
    softplus,
    sub,
    tile_prefix,
)

__all__ = [
    "StrategyKind",
    "rubi_fuse",
    "bias_product",
    "learned_mixin",
    "cf_combine",
    "cf_debias_infer",
    "Combined",
    "combine",
    "infer_logits",
    "gradient_ratio",
]


class StrategyKind(str, Enum):
    NONE = "none"
    RUBI = "rubi"
    BIAS_PRODUCT = "bias_product"
    LEARNED_MIXIN = "learned_mixin"
    CF_FULL = "cf_full"
    CF_VARIANT = "cf_variant"


def _check(main: Tensor, bias: Tensor, op: str) -> None:
    if main.shape != bias.shape:
        raise DimensionError(f"{op}: main {main.shape} and bias {bias.shape} differ")


def rubi_fuse(main_logits: Tensor, bias_logits: Tensor) -> Tensor:
    """Mask the main logits with ``sigmoid(bias_logits)``."""
    _check(main_logits, bias_logits, "rubi_fuse")
    return mul(main_logits, sigmoid(bias_logits))


def bias_product(main_logits: Tensor, bias_logits: Tensor) -> Tensor:
    _check(main_logits, bias_logits, "bias_product")
    return add(log_softmax(main_logits), log_softmax(bias_logits))


def learned_mixin(main_logits: Tensor, bias_logits: Tensor, gate_param: Tensor) -> Tensor:
    """``log_softmax(main) + softplus(gate) * log_softmax(bias)``."""
    _check(main_logits, bias_logits, "learned_mixin")
    return add(log_softmax(main_logits), mul(log_softmax(bias_logits), softplus(gate_param)))


def cf_combine(main_logits: Tensor, bias_logits: Tensor, fusion: str = "sum") -> Tensor:
    """Total-effect logits from the two branches.

    ``sum`` adds logits. ``harmonic`` uses ``log(s / (1 + s))`` with
    ``s = sigmoid(main) * sigmoid(bias)``.
    """
    _check(main_logits, bias_logits, "cf_combine")
    if fusion == "sum":
        return add(main_logits, bias_logits)
    if fusion == "harmonic":
        s = mul(sigmoid(main_logits), sigmoid(bias_logits))
        return sub(log(s), log(add(s, Tensor(np.ones(s.shape)))))
    raise ConfigError(f"unknown cf fusion {fusion!r}")


def cf_debias_infer(total_effect_logits, bias_logits, c: float = 1.0) -> np.ndarray:
    """Remove ``c`` times the direct bias effect from the total effect."""
    if c < 0:
        raise ConfigError(f"cf subtraction weight must be >= 0, got {c}")
    te = total_effect_logits.data if isinstance(total_effect_logits, Tensor) else np.asarray(total_effect_logits)
    b = bias_logits.data if isinstance(bias_logits, Tensor) else np.asarray(bias_logits)
    if te.shape != b.shape:
        raise DimensionError(f"cf_debias_infer: shapes {te.shape} and {b.shape} differ")
    return te - c * b


@dataclass
class Combined:
    """Training-time output of a combiner.

    ``scores`` feeds the (possibly loosened) main objective; each tensor in
    ``aux`` gets its own plain cross-entropy against the same targets.
    """

    scores: Tensor
    aux: list[Tensor] = field(default_factory=list)


def _const_like(const: Tensor, rows: int, width: int) -> Tensor:
    return tile_prefix(const, rows, width)


def combine(
    kind: StrategyKind | str,
    main: Tensor,
    bias: Tensor,
    gate: Tensor | None = None,
    cf_const: Tensor | None = None,
    fusion: str = "sum",
) -> Combined:
    kind = StrategyKind(kind)
    if kind is StrategyKind.NONE:
        return Combined(main)
    if kind is StrategyKind.RUBI:
        return Combined(rubi_fuse(main, bias), [bias])
    if kind is StrategyKind.BIAS_PRODUCT:
        # bias branch is fit on its own loss and held fixed inside the product
        return Combined(bias_product(main, detach(bias)), [bias])
    if kind is StrategyKind.LEARNED_MIXIN:
        if gate is None:
            raise ConfigError("learned_mixin needs a gate parameter")
        return Combined(learned_mixin(main, detach(bias), gate), [bias])
    if kind is StrategyKind.CF_FULL:
        return Combined(cf_combine(main, bias, fusion), [bias])
    if kind is StrategyKind.CF_VARIANT:
        if cf_const is None:
            raise ConfigError("cf_variant needs a constant head")
        const = _const_like(cf_const, *main.shape)
        counterfactual = cf_combine(const, detach(bias), fusion)
        return Combined(cf_combine(main, bias, fusion), [bias, counterfactual])
    raise ConfigError(f"unhandled strategy {kind}")


def infer_logits(
    kind: StrategyKind | str,
    main,
    bias=None,
    c: float = 1.0,
    cf_const=None,
    fusion: str = "sum",
) -> np.ndarray:
    """Inference scores. Only the counterfactual strategies read ``bias``."""
    kind = StrategyKind(kind)
    m = main.data if isinstance(main, Tensor) else np.asarray(main, dtype=np.float64)
    if kind in (StrategyKind.NONE, StrategyKind.RUBI, StrategyKind.BIAS_PRODUCT, StrategyKind.LEARNED_MIXIN):
        return m
    if bias is None:
        raise ConfigError(f"{kind.value} inference needs bias logits")
    b = bias.data if isinstance(bias, Tensor) else np.asarray(bias, dtype=np.float64)
    te = cf_combine(Tensor(m), Tensor(b), fusion).data
    if kind is StrategyKind.CF_FULL:
        return cf_debias_infer(te, b, c)
    const = np.asarray(cf_const.data if isinstance(cf_const, Tensor) else cf_const, dtype=np.float64)
    const = np.broadcast_to(const[: m.shape[1]], m.shape)
    direct = cf_combine(Tensor(const), Tensor(b), fusion).data
    return te - c * direct


def gradient_ratio(p_bias, p_debiased, gamma):
    """Ratio of loosened to plain gradient magnitudes for a two-part debiasing loss.

    ``(2 - p_b - p_d**gamma) / (2 - p_b - p_d)``; at most 1 for ``gamma`` in (0, 1).
    """
    p_b = np.asarray(p_bias, dtype=np.float64)
    p_d = np.asarray(p_debiased, dtype=np.float64)
    return (2.0 - p_b - p_d ** np.asarray(gamma, dtype=np.float64)) / (2.0 - p_b - p_d)
