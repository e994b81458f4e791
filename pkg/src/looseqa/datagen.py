"""Seeded synthetic datasets with controllable shortcut bias.

Two regimes:

* classification: each question type has a dominant answer drawn with
  probability ``prior_strength``; context features are noisy, mutually
  orthogonal class prototypes that identify the label on their own. Test splits either keep
  the training prior (``id_test``) or shift it (``ood_test``).
* span extraction: contexts of fixed-length sentences where every training
  answer sits in sentence ``k``; the dev split is partitioned by the
  sentence that holds the answer.

Every random draw comes from ``numpy.random.SeedSequence(seed)`` children,
one stream per split, so splits never share randomness.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Literal

import numpy as np

from .autodiff import ConfigError

__all__ = [
    "ParseError",
    "BiasedClassConfig",
    "SpanConfig",
    "ClassificationSet",
    "SpanSet",
    "QaSample",
    "SpanSample",
    "answer_priors",
    "gen_vqa_like",
    "gen_span_like",
    "serialize",
    "load",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1


class ParseError(ValueError):
    """A dataset record stream could not be parsed."""


@dataclass(frozen=True)
class BiasedClassConfig:
    n_types: int = 8
    n_answers: int = 16
    prior_strength: float = 0.9
    shift_mode: Literal["id", "shuffled_prior", "inverted_prior"] = "inverted_prior"
    n_train: int = 20000
    n_test: int = 4000
    n_val: int = 2000
    noise_sigma: float = 0.5
    context_dim: int = 16
    prototype_scale: float = 1.9
    question_noise: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.prior_strength < 1.0:
            raise ConfigError(f"prior_strength must lie in [0, 1), got {self.prior_strength}")
        if self.shift_mode not in ("id", "shuffled_prior", "inverted_prior"):
            raise ConfigError(f"unknown shift_mode {self.shift_mode!r}")
        if self.n_types < 1 or self.n_answers < 2:
            raise ConfigError("need at least one question type and two answers")
        if min(self.n_train, self.n_test, self.n_val) < 0:
            raise ConfigError("split sizes must be non-negative")
        if self.context_dim < self.n_answers:
            raise ConfigError("context_dim must be >= n_answers (orthogonal prototypes)")
        if self.noise_sigma < 0 or self.question_noise < 0:
            raise ConfigError("noise levels must be non-negative")

    @property
    def question_dim(self) -> int:
        return self.n_types


@dataclass(frozen=True)
class SpanConfig:
    n_sentences: int = 5
    sentence_len: int = 8
    feature_dim: int = 16
    train_sentence: int = 1
    n_train: int = 4000
    n_dev: int = 2000
    max_answer_len: int = 3
    noise_sigma: float = 0.5
    marker_strength: float = 1.4
    distractor_strength: float = 0.9

    def __post_init__(self):
        if not 1 <= self.train_sentence <= self.n_sentences:
            raise ConfigError(f"train_sentence {self.train_sentence} outside 1..{self.n_sentences}")
        if self.sentence_len < 2:
            raise ConfigError("sentences need at least two tokens")
        if not 1 <= self.max_answer_len <= self.sentence_len:
            raise ConfigError("max_answer_len must fit inside a sentence")
        if self.feature_dim < self.n_sentences + 3:
            raise ConfigError(f"feature_dim must be >= n_sentences + 3 = {self.n_sentences + 3}")

    @property
    def n_tokens(self) -> int:
        return self.n_sentences * self.sentence_len


@dataclass(frozen=True)
class QaSample:
    question_type: int
    question_features: np.ndarray
    context_features: np.ndarray
    label: int


@dataclass(frozen=True)
class SpanSample:
    tokens: np.ndarray
    sent_bounds: tuple[int, ...]
    answer: tuple[int, int]

    @property
    def answer_sentence_index(self) -> int:
        """1-based index of the sentence containing the answer."""
        return int(np.searchsorted(self.sent_bounds, self.answer[0], side="right"))


def _eq_arrays(a, b) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)


@dataclass(eq=False)
class ClassificationSet:
    qtype: np.ndarray
    qfeat: np.ndarray
    cfeat: np.ndarray
    label: np.ndarray
    meta: dict = field(default_factory=dict)

    kind = "classification"

    def __len__(self) -> int:
        return int(self.label.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClassificationSet):
            return NotImplemented
        return self.meta == other.meta and all(
            _eq_arrays(getattr(self, f), getattr(other, f)) for f in ("qtype", "qfeat", "cfeat", "label")
        )

    def __getitem__(self, i: int) -> QaSample:
        return QaSample(int(self.qtype[i]), self.qfeat[i], self.cfeat[i], int(self.label[i]))

    def subset(self, idx) -> "ClassificationSet":
        return ClassificationSet(self.qtype[idx], self.qfeat[idx], self.cfeat[idx], self.label[idx], dict(self.meta))

    @classmethod
    def empty(cls, qdim: int = 0, cdim: int = 0) -> "ClassificationSet":
        return cls(
            np.zeros(0, dtype=np.int64),
            np.zeros((0, qdim)),
            np.zeros((0, cdim)),
            np.zeros(0, dtype=np.int64),
        )


@dataclass(eq=False)
class SpanSet:
    tokens: np.ndarray  # (n, length, feature_dim)
    sent_bounds: np.ndarray  # (n, n_sentences + 1) token offsets
    start: np.ndarray
    end: np.ndarray
    meta: dict = field(default_factory=dict)

    kind = "span"

    def __len__(self) -> int:
        return int(self.start.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpanSet):
            return NotImplemented
        return self.meta == other.meta and all(
            _eq_arrays(getattr(self, f), getattr(other, f)) for f in ("tokens", "sent_bounds", "start", "end")
        )

    def __getitem__(self, i: int) -> SpanSample:
        return SpanSample(self.tokens[i], tuple(int(x) for x in self.sent_bounds[i]), (int(self.start[i]), int(self.end[i])))

    @property
    def answer_sentence(self) -> np.ndarray:
        """1-based sentence index holding each answer start."""
        return np.array(
            [np.searchsorted(b, s, side="right") for b, s in zip(self.sent_bounds, self.start)], dtype=np.int64
        )

    def subset(self, idx) -> "SpanSet":
        return SpanSet(self.tokens[idx], self.sent_bounds[idx], self.start[idx], self.end[idx], dict(self.meta))


def answer_priors(cfg: BiasedClassConfig, dominant: np.ndarray, mode: str) -> np.ndarray:
    """Per-type answer distributions, shape (n_types, n_answers).

    ``id``: mass ``rho`` on the type's dominant answer plus ``(1 - rho)``
    spread uniformly. ``shuffled_prior``: the same shape around another
    type's dominant answer. ``inverted_prior``: proportional to one minus the
    training prior, so frequent training answers become rare.
    """
    T, A, rho = cfg.n_types, cfg.n_answers, cfg.prior_strength
    base = np.full((T, A), (1.0 - rho) / A)
    if mode == "shuffled_prior":
        dominant = np.roll(dominant, 1)
    base[np.arange(T), dominant] += rho
    if mode == "inverted_prior":
        base = 1.0 - base
        base /= base.sum(axis=1, keepdims=True)
    return base


def _draw_classification(cfg, rng, n, priors, prototypes, split, seed) -> ClassificationSet:
    T, A = cfg.n_types, cfg.n_answers
    qtype = rng.integers(0, T, size=n)
    u = rng.random(n)
    cdf = np.cumsum(priors, axis=1)
    label = np.minimum((u[:, None] > cdf[qtype]).sum(axis=1), A - 1)
    qfeat = np.eye(T)[qtype] + rng.normal(0.0, cfg.question_noise, size=(n, T))
    cfeat = prototypes[label] + rng.normal(0.0, cfg.noise_sigma, size=(n, cfg.context_dim))
    meta = {"schema_version": SCHEMA_VERSION, "kind": "classification", "cfg": dataclasses.asdict(cfg), "seed": seed, "split": split}
    return ClassificationSet(qtype.astype(np.int64), qfeat, cfeat, label.astype(np.int64), meta)


def gen_vqa_like(cfg: BiasedClassConfig, seed: int) -> dict[str, ClassificationSet]:
    """Generate ``train``, ``val``, ``id_test`` and ``ood_test`` splits."""
    root = np.random.SeedSequence(seed)
    world, s_train, s_val, s_id, s_ood = (np.random.default_rng(s) for s in root.spawn(5))
    dominant = world.integers(0, cfg.n_answers, size=cfg.n_types)
    # rotated scaled one-hots: every class is equally separable from every other
    q, _ = np.linalg.qr(world.normal(size=(cfg.context_dim, cfg.context_dim)))
    prototypes = cfg.prototype_scale * q[: cfg.n_answers]
    id_prior = answer_priors(cfg, dominant, "id")
    shift = cfg.shift_mode
    ood_prior = answer_priors(cfg, dominant, shift)
    return {
        "train": _draw_classification(cfg, s_train, cfg.n_train, id_prior, prototypes, "train", seed),
        "val": _draw_classification(cfg, s_val, cfg.n_val, id_prior, prototypes, "val", seed),
        "id_test": _draw_classification(cfg, s_id, cfg.n_test, id_prior, prototypes, "id_test", seed),
        "ood_test": _draw_classification(cfg, s_ood, cfg.n_test, ood_prior, prototypes, "ood_test", seed),
    }


def _draw_spans(cfg: SpanConfig, rng, sentences: np.ndarray, split: str, seed: int) -> SpanSet:
    """Build contexts whose answers sit in the given 1-based ``sentences``.

    Token layout: one-hot sentence index (the position cue), then content
    dims ``[start marker, end marker, inside marker, noise...]``. Each
    context also carries a weaker decoy span in a different sentence.
    """
    n = sentences.shape[0]
    S, W, D = cfg.n_sentences, cfg.sentence_len, cfg.feature_dim
    L = S * W
    tokens = np.zeros((n, L, D))
    tokens[:, :, S:] = rng.normal(0.0, cfg.noise_sigma, size=(n, L, D - S))
    sent_of_token = np.repeat(np.arange(S), W)
    tokens[:, np.arange(L), sent_of_token] = 1.0
    bounds = np.tile(np.arange(0, L + 1, W), (n, 1))

    def place(sent0, strength):
        length = rng.integers(1, cfg.max_answer_len + 1, size=n)
        offset = rng.integers(0, W - length + 1)
        start = sent0 * W + offset
        end = start + length - 1
        rows = np.arange(n)
        tokens[rows, start, S] += strength
        tokens[rows, end, S + 1] += strength
        for j in range(cfg.max_answer_len):
            inside = j < length
            tokens[rows[inside], (start + j)[inside], S + 2] += strength
        return start, end

    decoy_shift = rng.integers(1, S, size=n)
    decoy_sent = (sentences - 1 + decoy_shift) % S
    start, end = place(sentences - 1, cfg.marker_strength)
    place(decoy_sent, cfg.distractor_strength)
    meta = {"schema_version": SCHEMA_VERSION, "kind": "span", "cfg": dataclasses.asdict(cfg), "seed": seed, "split": split}
    return SpanSet(tokens, bounds.astype(np.int64), start.astype(np.int64), end.astype(np.int64), meta)


def gen_span_like(cfg: SpanConfig, seed: int) -> dict:
    """Return ``{"train_k": SpanSet, "dev_by_sentence": {k: SpanSet}}``.

    Training answers all lie in sentence ``cfg.train_sentence``; dev answers
    are spread uniformly over sentences and partitioned by sentence index.
    """
    root = np.random.SeedSequence(seed)
    s_train, s_dev = (np.random.default_rng(s) for s in root.spawn(2))
    train = _draw_spans(cfg, s_train, np.full(cfg.n_train, cfg.train_sentence), "train", seed)
    dev_sent = s_dev.integers(1, cfg.n_sentences + 1, size=cfg.n_dev)
    dev = _draw_spans(cfg, s_dev, dev_sent, "dev", seed)
    by_sentence = {}
    for k in range(1, cfg.n_sentences + 1):
        part = dev.subset(np.flatnonzero(dev_sent == k))
        part.meta["split"] = f"dev_k{k}"
        by_sentence[k] = part
    return {"train_k": train, "dev_by_sentence": by_sentence}


def serialize(dataset) -> Iterator[str]:
    """Yield one JSON line per sample, preceded by a header when ``meta`` is set."""
    if dataset.meta:
        yield json.dumps(dataset.meta, sort_keys=True)
    if isinstance(dataset, ClassificationSet):
        for i in range(len(dataset)):
            yield json.dumps(
                {
                    "qtype": int(dataset.qtype[i]),
                    "qfeat": dataset.qfeat[i].tolist(),
                    "cfeat": dataset.cfeat[i].tolist(),
                    "label": int(dataset.label[i]),
                }
            )
    elif isinstance(dataset, SpanSet):
        for i in range(len(dataset)):
            yield json.dumps(
                {
                    "tokens": dataset.tokens[i].tolist(),
                    "sent_bounds": dataset.sent_bounds[i].tolist(),
                    "start": int(dataset.start[i]),
                    "end": int(dataset.end[i]),
                }
            )
    else:
        raise TypeError(f"cannot serialize {type(dataset).__name__}")


_CLS_KEYS = {"qtype", "qfeat", "cfeat", "label"}
_SPAN_KEYS = {"tokens", "sent_bounds", "start", "end"}


def load(lines: Iterable[str]):
    """Inverse of :func:`serialize`. Blank lines are ignored."""
    meta: dict = {}
    records = []
    kind = None
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: malformed record ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise ParseError(f"line {lineno}: expected a JSON object")
        if "schema_version" in rec:
            if records or meta:
                raise ParseError(f"line {lineno}: header must be the first line")
            if rec["schema_version"] != SCHEMA_VERSION:
                raise ParseError(f"line {lineno}: unsupported schema_version {rec['schema_version']}")
            meta = rec
            kind = rec.get("kind")
            continue
        keys = set(rec)
        rec_kind = "classification" if keys == _CLS_KEYS else "span" if keys == _SPAN_KEYS else None
        if rec_kind is None:
            raise ParseError(f"line {lineno}: unexpected fields {sorted(keys)}")
        if kind is None:
            kind = rec_kind
        elif rec_kind != kind:
            raise ParseError(f"line {lineno}: {rec_kind} record in a {kind} stream")
        records.append(rec)
    if kind == "span":
        if not records:
            return SpanSet(np.zeros((0, 0, 0)), np.zeros((0, 0), dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), meta)
        return SpanSet(
            np.array([r["tokens"] for r in records], dtype=np.float64),
            np.array([r["sent_bounds"] for r in records], dtype=np.int64),
            np.array([r["start"] for r in records], dtype=np.int64),
            np.array([r["end"] for r in records], dtype=np.int64),
            meta,
        )
    if not records:
        cfg = meta.get("cfg", {})
        out = ClassificationSet.empty(cfg.get("n_types", 0), cfg.get("context_dim", 0))
        out.meta = meta
        return out
    return ClassificationSet(
        np.array([r["qtype"] for r in records], dtype=np.int64),
        np.array([r["qfeat"] for r in records], dtype=np.float64),
        np.array([r["cfeat"] for r in records], dtype=np.float64),
        np.array([r["label"] for r in records], dtype=np.int64),
        meta,
    )
