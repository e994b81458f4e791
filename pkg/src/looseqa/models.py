"""Small MLP task heads: a two-branch answer classifier and a span predictor."""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import (
    ConfigError,
    Tensor,
    add_row,
    glorot_uniform,
    matmul,
    reshape,
    softmax,
    tanh,
    tile_prefix,
)

__all__ = [
    "MLP",
    "ClassifierModel",
    "SpanModel",
    "Prediction",
    "forward_classifier",
    "forward_span",
    "decode_span",
    "save_params",
    "load_params",
]


class MLP:
    """Dense layers with tanh between them and a linear output."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, prefix: str = "mlp"):
        if len(sizes) < 2:
            raise ConfigError(f"MLP needs at least input and output sizes, got {sizes}")
        self.sizes = list(sizes)
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = Tensor(glorot_uniform(rng, fan_in, fan_out), name=f"{prefix}.{i}.weight")
            b = Tensor(np.zeros(fan_out), name=f"{prefix}.{i}.bias")
            self.layers.append((w, b))

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(self.layers):
            x = add_row(matmul(x, w), b)
            if i < len(self.layers) - 1:
                x = tanh(x)
        return x

    def params(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]


class _Module:
    def params(self) -> list[Tensor]:
        raise NotImplementedError

    def named_params(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.params()}

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_params().items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        named = self.named_params()
        if set(state) != set(named):
            missing = sorted(set(named) - set(state))
            extra = sorted(set(state) - set(named))
            raise KeyError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != named[name].shape:
                raise ValueError(f"{name}: shape {value.shape} != {named[name].shape}")
            named[name].data = value.copy()
            named[name].zero_grad()


class ClassifierModel(_Module):
    """Answer classifier with a main branch and a question-only bias branch.

    The main branch reads context and question features; the bias branch
    reads question features only. ``gate`` feeds learned-mixin and
    ``cf_const`` is the constant head used by the counterfactual variant.
    """

    def __init__(
        self,
        context_dim: int,
        question_dim: int,
        n_answers: int,
        hidden: int = 64,
        depth: int = 2,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.context_dim = context_dim
        self.question_dim = question_dim
        self.n_answers = n_answers
        widths = [hidden] * depth
        self.main_branch = MLP([context_dim + question_dim, *widths, n_answers], rng, "main")
        self.bias_branch = MLP([question_dim, *widths, n_answers], rng, "bias")
        self.gate = Tensor(np.zeros(1), name="gate")
        self.cf_const = Tensor(np.zeros(n_answers), name="cf_const")

    def params(self) -> list[Tensor]:
        return [*self.main_branch.params(), *self.bias_branch.params(), self.gate, self.cf_const]


class SpanModel(_Module):
    """Per-token encoder with start/end scorers and a position-only bias branch."""

    def __init__(self, token_dim: int, max_tokens: int, hidden: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.token_dim = token_dim
        self.max_tokens = max_tokens
        self.encoder = MLP([token_dim, hidden], rng, "encoder")
        self.start_head = MLP([hidden, 1], rng, "start_head")
        self.end_head = MLP([hidden, 1], rng, "end_head")
        # position-indexed scores; never see token content
        self.bias_start = Tensor(np.zeros(max_tokens), name="bias.start")
        self.bias_end = Tensor(np.zeros(max_tokens), name="bias.end")
        self.gate = Tensor(np.zeros(1), name="gate")
        self.cf_const_start = Tensor(np.zeros(max_tokens), name="cf_const.start")
        self.cf_const_end = Tensor(np.zeros(max_tokens), name="cf_const.end")

    def params(self) -> list[Tensor]:
        return [
            *self.encoder.params(),
            *self.start_head.params(),
            *self.end_head.params(),
            self.bias_start,
            self.bias_end,
            self.gate,
            self.cf_const_start,
            self.cf_const_end,
        ]


@dataclass
class Prediction:
    logits: np.ndarray
    probs: np.ndarray
    argmax: np.ndarray

    @classmethod
    def from_logits(cls, logits) -> "Prediction":
        z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
        return cls(z, softmax(z), np.argmax(z, axis=1))


def forward_classifier(model: ClassifierModel, qfeat, cfeat) -> tuple[Tensor, Tensor]:
    """Return ``(main_logits, bias_logits)``, each batch x n_answers."""
    q = np.asarray(qfeat, dtype=np.float64)
    c = np.asarray(cfeat, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != model.question_dim:
        raise ConfigError(f"question features {q.shape} do not match width {model.question_dim}")
    if c.ndim != 2 or c.shape != (q.shape[0], model.context_dim):
        raise ConfigError(f"context features {c.shape} do not match width {model.context_dim}")
    main = model.main_branch(Tensor(np.concatenate([c, q], axis=1)))
    bias = model.bias_branch(Tensor(q))
    return main, bias


def forward_span(model: SpanModel, tokens) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Score every token as a span start/end.

    ``tokens`` is (batch, length, token_dim). Returns start, end, bias-start
    and bias-end logits, each (batch, length).
    """
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != model.token_dim:
        raise ConfigError(f"tokens {x.shape} do not match token width {model.token_dim}")
    b, length, d = x.shape
    if length < 1:
        raise ValueError("empty context: need at least one token")
    if length > model.max_tokens:
        raise ConfigError(f"context of {length} tokens exceeds max_tokens={model.max_tokens}")
    h = tanh(model.encoder(Tensor(x.reshape(b * length, d))))
    start = reshape(model.start_head(h), (b, length))
    end = reshape(model.end_head(h), (b, length))
    bias_start = tile_prefix(model.bias_start, b, length)
    bias_end = tile_prefix(model.bias_end, b, length)
    return start, end, bias_start, bias_end


def decode_span(start_logits, end_logits, max_answer_len: int = 30):
    """Best ``(start, end)`` by summed logits, with ``start <= end < start + max_answer_len``.

    Accepts 1-D (one context) or 2-D (batch) inputs; indices are 0-based.
    """
    if max_answer_len < 1:
        raise ConfigError(f"max_answer_len must be positive, got {max_answer_len}")
    s = np.asarray(start_logits.data if isinstance(start_logits, Tensor) else start_logits, dtype=np.float64)
    e = np.asarray(end_logits.data if isinstance(end_logits, Tensor) else end_logits, dtype=np.float64)
    if s.shape != e.shape:
        raise ValueError(f"start/end logits differ in shape: {s.shape} vs {e.shape}")
    single = s.ndim == 1
    if single:
        s, e = s[None], e[None]
    length = s.shape[1]
    i = np.arange(length)
    offset = i[None, :] - i[:, None]
    valid = (offset >= 0) & (offset < max_answer_len)
    scores = np.where(valid[None], s[:, :, None] + e[:, None, :], -np.inf)
    flat = scores.reshape(s.shape[0], -1).argmax(axis=1)
    starts, ends = np.divmod(flat, length)
    if single:
        return int(starts[0]), int(ends[0])
    return starts, ends


def save_params(model: _Module, path) -> None:
    """Write one JSON record per parameter: ``{"name", "shape", "values"}``.

    Values use Python's shortest round-trip float repr, so a reload is
    bit-exact.
    """
    with open(Path(path), "w", encoding="utf-8") as fh:
        for name, p in model.named_params().items():
            rec = {"name": name, "shape": list(p.shape), "values": p.data.ravel().tolist()}
            fh.write(json.dumps(rec) + "\n")


def load_params(model: _Module, path) -> None:
    state = {}
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                state[rec["name"]] = np.array(rec["values"], dtype=np.float64).reshape(rec["shape"])
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: bad parameter record ({exc})") from exc
    model.load_state(state)
