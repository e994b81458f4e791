import json

import numpy as np
import pytest

from looseqa.autodiff import ConfigError
from looseqa.datagen import (
    BiasedClassConfig,
    ClassificationSet,
    ParseError,
    SpanConfig,
    SpanSet,
    answer_priors,
    gen_span_like,
    gen_vqa_like,
    load,
    serialize,
)

from probe import fit_probe

SMALL = BiasedClassConfig(n_train=3000, n_test=1000, n_val=500)


def acc(pred, y):
    return float(np.mean(pred == y))


@pytest.fixture(scope="module")
def default_data():
    cfg = BiasedClassConfig()
    return cfg, gen_vqa_like(cfg, 1337)


def test_priors_are_distributions():
    cfg = BiasedClassConfig()
    dom = np.arange(cfg.n_types)
    for mode in ("id", "shuffled_prior", "inverted_prior"):
        p = answer_priors(cfg, dom, mode)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        assert (p >= 0).all()
    inv = answer_priors(cfg, dom, "inverted_prior")
    assert (inv.argmin(axis=1) == dom).all()


def test_splits_and_sizes():
    d = gen_vqa_like(SMALL, 0)
    assert set(d) == {"train", "val", "id_test", "ood_test"}
    assert [len(d[k]) for k in ("train", "val", "id_test", "ood_test")] == [3000, 500, 1000, 1000]
    assert d["train"].qfeat.shape == (3000, SMALL.n_types)
    assert d["train"].cfeat.shape == (3000, SMALL.context_dim)


def test_same_seed_is_byte_identical():
    a, b = gen_vqa_like(SMALL, 42), gen_vqa_like(SMALL, 42)
    for k in a:
        assert list(serialize(a[k])) == list(serialize(b[k]))
    assert not np.array_equal(gen_vqa_like(SMALL, 43)["train"].cfeat, a["train"].cfeat)


def test_splits_use_disjoint_streams():
    d = gen_vqa_like(BiasedClassConfig(n_train=500, n_test=500, n_val=500), 3)
    assert not np.array_equal(d["train"].cfeat, d["val"].cfeat)
    assert not np.array_equal(d["id_test"].cfeat, d["val"].cfeat)


@pytest.mark.parametrize("kwargs", [{"prior_strength": 1.0}, {"prior_strength": -0.1}, {"shift_mode": "flip"}, {"context_dim": 4}, {"n_train": -1}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        BiasedClassConfig(**kwargs)


def test_context_alone_predicts_label(default_data):
    cfg, d = default_data
    ood, idt = d["ood_test"], d["id_test"]
    half = len(ood) // 2
    probe = fit_probe(ood.cfeat[:half], ood.label[:half], cfg.n_answers, balanced=True)
    held_out = acc(probe(ood.cfeat[half:]), ood.label[half:])
    on_id = acc(probe(idt.cfeat), idt.label)
    assert held_out >= 0.95
    # split invariance of the context signal
    assert abs(held_out - on_id) <= 0.02


def test_type_probe_measures_prior_strength(default_data):
    cfg, d = default_data
    tr, ood = d["train"], d["ood_test"]
    onehot = lambda s: np.eye(cfg.n_types)[s.qtype]  # noqa: E731
    probe = fit_probe(onehot(tr), tr.label, cfg.n_answers)
    expected = cfg.prior_strength + (1 - cfg.prior_strength) / cfg.n_answers
    on_train = acc(probe(onehot(tr)), tr.label)
    on_ood = acc(probe(onehot(ood)), ood.label)
    assert on_train == pytest.approx(expected, abs=0.03)
    assert on_ood <= 1.0 / cfg.n_answers < on_train


def test_no_prior_means_no_shift():
    cfg = BiasedClassConfig(prior_strength=0.0, n_train=6000, n_test=3000)
    d = gen_vqa_like(cfg, 5)
    for mode in ("id", "inverted_prior"):
        np.testing.assert_allclose(answer_priors(cfg, np.zeros(cfg.n_types, int), mode), 1.0 / cfg.n_answers)
    probe = fit_probe(d["train"].cfeat, d["train"].label, cfg.n_answers)
    assert abs(acc(probe(d["id_test"].cfeat), d["id_test"].label) - acc(probe(d["ood_test"].cfeat), d["ood_test"].label)) <= 0.02


# spans

SPAN = SpanConfig(n_train=400, n_dev=500)


def test_span_train_answers_in_sentence_k():
    for k in (1, 3):
        d = gen_span_like(SpanConfig(n_train=300, n_dev=100, train_sentence=k), 1)
        tr = d["train_k"]
        assert (tr.answer_sentence == k).all()
        assert (tr.end - tr.start + 1 <= 3).all() and (tr.start <= tr.end).all()


def test_span_dev_partition_is_disjoint_and_exhaustive():
    d = gen_span_like(SPAN, 2)
    parts = d["dev_by_sentence"]
    assert sorted(parts) == [1, 2, 3, 4, 5]
    assert sum(len(p) for p in parts.values()) == SPAN.n_dev
    for k, p in parts.items():
        assert (p.answer_sentence == k).all()
    rows = np.concatenate([p.tokens.reshape(len(p), -1) for p in parts.values()])
    assert len(np.unique(rows, axis=0)) == SPAN.n_dev


def test_span_sentences_have_at_least_two_tokens():
    d = gen_span_like(SPAN, 2)
    assert (np.diff(d["train_k"].sent_bounds, axis=1) >= 2).all()
    with pytest.raises(ConfigError):
        SpanConfig(sentence_len=1, max_answer_len=1)
    with pytest.raises(ConfigError):
        SpanConfig(train_sentence=6)


def test_span_token_level_answer_recoverable():
    cfg = SpanConfig(n_train=1500, n_dev=500)
    d = gen_span_like(cfg, 7)
    S = cfg.n_sentences

    def token_table(ds):
        pos = np.arange(cfg.n_tokens)
        inside = (pos[None] >= ds.start[:, None]) & (pos[None] <= ds.end[:, None])
        return ds.tokens[:, :, S:].reshape(-1, cfg.feature_dim - S), inside.ravel().astype(int)

    x, y = token_table(d["train_k"])
    probe = fit_probe(x, y, 2)
    xd, yd = token_table(d["dev_by_sentence"][3])
    assert acc(probe(xd), yd) >= 0.95


def test_span_same_seed_identical():
    a, b = gen_span_like(SPAN, 9), gen_span_like(SPAN, 9)
    assert a["train_k"] == b["train_k"]
    assert all(a["dev_by_sentence"][k] == b["dev_by_sentence"][k] for k in a["dev_by_sentence"])


# serialization


def test_round_trip_thousand_samples():
    d = gen_vqa_like(BiasedClassConfig(n_train=1000, n_test=10, n_val=10), 11)["train"]
    back = load(serialize(d))
    assert back == d
    assert back.cfeat.tobytes() == d.cfeat.tobytes()
    spans = gen_span_like(SpanConfig(n_train=1000, n_dev=10), 11)["train_k"]
    assert load(serialize(spans)) == spans


def test_header_carries_schema_and_seed():
    d = gen_vqa_like(SMALL, 4)["id_test"]
    header = json.loads(next(iter(serialize(d))))
    assert header["schema_version"] == 1 and header["seed"] == 4 and header["cfg"]["n_types"] == 8


def test_empty_dataset_round_trip():
    empty = ClassificationSet.empty()
    lines = list(serialize(empty))
    assert lines == []
    back = load(lines)
    assert isinstance(back, ClassificationSet) and len(back) == 0


def test_truncated_final_line_names_line():
    d = gen_vqa_like(SMALL, 4)["val"].subset(np.arange(3))
    lines = list(serialize(d))
    lines[-1] = lines[-1][: len(lines[-1]) // 2]
    with pytest.raises(ParseError, match=f"line {len(lines)}"):
        load(lines)


def test_wrong_fields_and_mixed_kinds_rejected():
    with pytest.raises(ParseError, match="line 1"):
        load(['{"qtype": 0}'])
    cls_line = json.dumps({"qtype": 0, "qfeat": [0.0], "cfeat": [0.0], "label": 0})
    span_line = json.dumps({"tokens": [[0.0]], "sent_bounds": [0, 1], "start": 0, "end": 0})
    with pytest.raises(ParseError, match="line 2"):
        load([cls_line, span_line])
    assert isinstance(load([span_line]), SpanSet)
