"""Cross-entropy, adaptive loose optimization (ALO), span losses, focal loss.

ALO scales a batch's mean cross-entropy by a loose factor

    gamma = min(loss[t - lag] / loss[t], clamp)

computed from the history of un-scaled batch losses. Because the loss is a
mean of ``-log p``, ``gamma * CE`` equals the mean of ``-log(p ** gamma)``.
Gamma is a constant for the batch: no gradient flows through the ratio.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .autodiff import (
    ConfigError,
    NumericError,
    Tensor,
    add,
    exp,
    log_softmax,
    mean,
    mul,
    pick,
    power,
    scale,
    sub,
)

__all__ = [
    "DataError",
    "LossConfig",
    "LooseState",
    "cross_entropy",
    "gamma",
    "alo_loss",
    "span_losses",
    "focal_loss",
]

DEFAULT_CLAMP = 0.999


class DataError(ValueError):
    """Targets or spans are out of range for the given logits."""


@dataclass
class LooseState:
    """Ring buffer of recent base losses that yields the loose factor."""

    lag: int = 1
    clamp: float = DEFAULT_CLAMP
    window: int | None = None
    history: deque = field(init=False, repr=False)
    batch_index: int = field(default=0, init=False)

    def __post_init__(self):
        if self.lag < 1:
            raise ConfigError(f"lag must be >= 1, got {self.lag}")
        if not 0.0 < self.clamp < 1.0:
            raise ConfigError(f"clamp must lie in (0, 1), got {self.clamp}")
        w = self.lag if self.window is None else self.window
        if w < self.lag:
            raise ConfigError(f"window {w} is shorter than lag {self.lag}")
        self.window = w
        self.history = deque(maxlen=w)

    def lagged(self) -> float | None:
        """The loss recorded ``lag`` batches ago, if there is one."""
        if len(self.history) < self.lag:
            return None
        return self.history[-self.lag]

    def push(self, loss: float) -> None:
        if not (math.isfinite(loss) and loss > 0):
            raise NumericError(f"loose state only stores positive finite losses, got {loss}")
        self.history.append(float(loss))
        self.batch_index += 1


@dataclass(frozen=True)
class LossConfig:
    kind: Literal["ce", "alo", "focal"] = "ce"
    lag: int = 1
    clamp: float = DEFAULT_CLAMP
    focal_gamma: float = 2.0
    span_state_mode: Literal["shared", "separate"] = "shared"
    # which loss feeds the loose state when a debiasing combiner is active
    gamma_source: Literal["combined", "main"] = "combined"

    def __post_init__(self):
        if self.kind not in ("ce", "alo", "focal"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.lag < 1:
            raise ConfigError(f"lag must be >= 1, got {self.lag}")
        if not 0.0 < self.clamp < 1.0:
            raise ConfigError(f"clamp must lie in (0, 1), got {self.clamp}")
        if self.focal_gamma < 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.span_state_mode not in ("shared", "separate"):
            raise ConfigError(f"unknown span_state_mode {self.span_state_mode!r}")
        if self.gamma_source not in ("combined", "main"):
            raise ConfigError(f"unknown gamma_source {self.gamma_source!r}")

    def new_state(self) -> LooseState:
        return LooseState(lag=self.lag, clamp=self.clamp)


def _check_targets(logits: Tensor, targets) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or t.shape != (logits.shape[0],):
        raise DataError(f"targets shape {t.shape} does not match logits {logits.shape}")
    c = logits.shape[1]
    if t.size and (t.min() < 0 or t.max() >= c):
        raise DataError(f"targets must lie in [0, {c}), got range [{t.min()}, {t.max()}]")
    return t


def nll(log_probs: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of already-normalized log probabilities."""
    t = _check_targets(log_probs, targets)
    return scale(mean(pick(log_probs, t)), -1.0)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[target]``."""
    _check_targets(logits, targets)
    return nll(log_softmax(logits), targets)


def gamma(state: LooseState, current_loss: float) -> float:
    """Loose factor for this batch; records ``current_loss`` in ``state``.

    Until ``lag`` earlier losses exist the factor is ``state.clamp``.
    """
    current_loss = float(current_loss)
    if not (math.isfinite(current_loss) and current_loss > 0):
        raise NumericError(f"current loss must be positive and finite, got {current_loss}")
    prev = state.lagged()
    g = state.clamp if prev is None else min(prev / current_loss, state.clamp)
    state.push(current_loss)
    return g


def loosen(base: Tensor, state: LooseState) -> tuple[Tensor, float]:
    """Scale an already-computed base loss by its loose factor."""
    g = gamma(state, base.item())
    return scale(base, g), g


def alo_loss(logits: Tensor, targets, state: LooseState) -> Tensor:
    loss, _ = loosen(cross_entropy(logits, targets), state)
    return loss


def _check_span(logits: Tensor, idx, which: str) -> np.ndarray:
    i = np.asarray(idx, dtype=np.int64)
    if i.shape != (logits.shape[0],):
        raise DataError(f"{which} indices shape {i.shape} does not match logits {logits.shape}")
    if i.size and (i.min() < 0 or i.max() >= logits.shape[1]):
        raise DataError(f"{which} index out of range for {logits.shape[1]} tokens")
    return i


def span_losses(
    start_logits: Tensor,
    end_logits: Tensor,
    answer,
    cfg: LossConfig,
    states: dict | None = None,
    normalized: bool = False,
    gamma_from: tuple[float, float] | None = None,
):
    """Per-head losses for span extraction and their sum.

    ``answer`` is a pair ``(starts, ends)``. For ALO, ``states`` holds the
    loose states (keys ``"shared"`` or ``"start"``/``"end"``); they are
    created on first use. With ``normalized=True`` the inputs are treated as
    log probabilities and are not re-softmaxed. ``gamma_from`` replaces the
    per-head base losses fed to the loose state (the objective is unchanged).

    Returns ``(loss_start, loss_end, total, info)`` where ``info`` carries the
    base (un-loosened) losses and the factor(s) applied.
    """
    starts, ends = answer
    s = _check_span(start_logits, starts, "start")
    e = _check_span(end_logits, ends, "end")
    if np.any(s > e):
        raise DataError("span start after end")
    head = nll if normalized else cross_entropy
    if cfg.kind == "focal":
        if normalized:
            raise ConfigError("focal loss expects raw logits")
        ls = focal_loss(start_logits, s, cfg.focal_gamma)
        le = focal_loss(end_logits, e, cfg.focal_gamma)
    else:
        ls, le = head(start_logits, s), head(end_logits, e)
    base_s, base_e = ls.item(), le.item()
    info = {"base_start": base_s, "base_end": base_e, "base": base_s + base_e, "gamma": 1.0}
    if cfg.kind == "alo":
        if states is None:
            states = {}
        src_s, src_e = (base_s, base_e) if gamma_from is None else gamma_from
        if cfg.span_state_mode == "shared":
            st = states.setdefault("shared", cfg.new_state())
            g = gamma(st, 0.5 * (src_s + src_e))
            ls, le = scale(ls, g), scale(le, g)
            info["gamma"] = g
        else:
            gs = gamma(states.setdefault("start", cfg.new_state()), src_s)
            ge = gamma(states.setdefault("end", cfg.new_state()), src_e)
            ls, le = scale(ls, gs), scale(le, ge)
            info.update(gamma=0.5 * (gs + ge), gamma_start=gs, gamma_end=ge)
    return ls, le, add(ls, le), info


def focal_loss(logits: Tensor, targets, focal_gamma: float) -> Tensor:
    """Mean of ``-(1 - p) ** focal_gamma * log p`` on the target class."""
    if focal_gamma < 0:
        raise ConfigError(f"focal_gamma must be >= 0, got {focal_gamma}")
    t = _check_targets(logits, targets)
    logp = pick(log_softmax(logits), t)
    if focal_gamma == 0:
        return scale(mean(logp), -1.0)
    p = exp(logp)
    ones = Tensor(np.ones(p.shape))
    weight = power(sub(ones, p), focal_gamma)
    return scale(mean(mul(weight, logp)), -1.0)
