"""Evaluation formulas: open-ended and standard accuracy, token F1, harmonic mean."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .losses import DataError

__all__ = [
    "ResultRow",
    "open_ended_accuracy",
    "standard_accuracy",
    "harmonic_mean",
    "token_f1",
    "macro_f1",
]


@dataclass(frozen=True)
class ResultRow:
    method: str
    loss: str
    strategy: str
    seed: int
    split: str
    metric: str
    value: float

    def __post_init__(self):
        if not (math.isfinite(self.value) and 0.0 <= self.value <= 1.0):
            raise ValueError(f"metric value {self.value} outside [0, 1]")

    @property
    def key(self) -> tuple:
        return (self.method, self.loss, self.strategy, self.seed, self.split, self.metric)

    def as_dict(self) -> dict:
        return asdict(self)


def open_ended_accuracy(n_a: int) -> float:
    """``min(n_a / 3, 1)`` where ``n_a`` counts annotators agreeing with the prediction."""
    if n_a < 0:
        raise ValueError(f"n_a must be non-negative, got {n_a}")
    return min(n_a / 3.0, 1.0)


def standard_accuracy(preds, labels) -> float:
    p = np.asarray(preds)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise DataError(f"predictions {p.shape} and labels {y.shape} differ in length")
    if p.size == 0:
        return 0.0
    return float(np.mean(p == y))


def harmonic_mean(xs: Sequence[float]) -> float:
    xs = [float(x) for x in xs]
    if not xs:
        raise ValueError("harmonic mean of an empty sequence")
    if any(not x > 0 for x in xs):
        raise ValueError(f"harmonic mean needs positive values, got {xs}")
    return len(xs) / sum(1.0 / x for x in xs)


def _span_tokens(span, context) -> list:
    s, e = int(span[0]), int(span[1])
    n = len(context)
    if not 0 <= s <= e < n:
        raise DataError(f"span ({s}, {e}) invalid for a context of {n} tokens")
    return list(context[s : e + 1])


def token_f1(pred_span, gold_span, context=None) -> float:
    """F1 between the token bags of two spans (0-based, inclusive ends).

    ``context`` is any sequence of hashable tokens; by default each position
    is its own distinct token.
    """
    if context is None:
        context = range(max(int(pred_span[1]), int(gold_span[1])) + 1)
    pred = Counter(_span_tokens(pred_span, context))
    gold = Counter(_span_tokens(gold_span, context))
    common = sum((pred & gold).values())
    if common == 0:
        return 0.0
    precision = common / sum(pred.values())
    recall = common / sum(gold.values())
    return 2 * precision * recall / (precision + recall)


def macro_f1(pred_spans, gold_answers, contexts=None) -> float:
    """Mean over questions of the best F1 against any gold answer.

    ``gold_answers[i]`` may be a single ``(start, end)`` or a list of them.
    """
    scores = []
    for i, pred in enumerate(pred_spans):
        golds = gold_answers[i]
        if np.ndim(golds) == 1:
            golds = [golds]
        ctx = None if contexts is None else contexts[i]
        scores.append(max(token_f1(pred, g, ctx) for g in golds))
    return float(np.mean(scores)) if scores else 0.0
