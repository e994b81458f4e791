import ast
import inspect
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from looseqa import debias
from looseqa.autodiff import ConfigError, DimensionError, Tape, Tensor, backward, softmax
from looseqa.debias import (
    StrategyKind,
    bias_product,
    cf_combine,
    cf_debias_infer,
    combine,
    gradient_ratio,
    infer_logits,
    learned_mixin,
    rubi_fuse,
)
from looseqa.losses import cross_entropy

from conftest import analytic_grads, central_difference, rel_err


# RUBi


def test_rubi_zero_bias_halves_main(rng):
    m = rng.normal(size=(3, 4))
    np.testing.assert_allclose(rubi_fuse(Tensor(m), Tensor(np.zeros((3, 4)))).data, 0.5 * m)


def test_rubi_saturated_mask_passes_main():
    out = rubi_fuse(Tensor([[2.0, -1.0]]), Tensor([[800.0, 0.0]])).data
    assert out[0, 0] == 2.0


def test_rubi_mask_can_reorder_close_logits():
    main = Tensor([[1.0, 0.9]])
    bias = Tensor([[-5.0, 5.0]])
    assert main.data.argmax() == 0
    assert rubi_fuse(main, bias).data.argmax() == 1


def test_shape_mismatch_raises():
    a, b = Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))
    for fn in (rubi_fuse, bias_product, cf_combine):
        with pytest.raises(DimensionError):
            fn(a, b)
    with pytest.raises(DimensionError):
        learned_mixin(a, b, Tensor([0.0]))


# bias product and learned mixin


def test_bias_product_neutral_elements(rng):
    m = Tensor(rng.normal(size=(5, 6)))
    b = Tensor(rng.normal(size=(5, 6)))
    flat = Tensor(np.zeros((5, 6)))
    np.testing.assert_array_equal(bias_product(m, flat).data.argmax(1), m.data.argmax(1))
    np.testing.assert_array_equal(bias_product(flat, b).data.argmax(1), b.data.argmax(1))


def test_bias_product_renormalizes(rng):
    z = bias_product(Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(4, 5)))).data
    np.testing.assert_allclose(softmax(z).sum(axis=1), 1.0, atol=1e-9)


def test_learned_mixin_reductions(rng):
    m = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(3, 4)))
    off = learned_mixin(m, b, Tensor([-50.0])).data
    np.testing.assert_allclose(softmax(off), softmax(m.data), atol=1e-12)
    g_one = np.log(np.e - 1.0)  # softplus(g_one) == 1
    np.testing.assert_allclose(learned_mixin(m, b, Tensor([g_one])).data, bias_product(m, b).data, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30))
def test_learned_mixin_gate_positive(g):
    m = Tensor(np.array([[0.0, 1.0]]))
    b = Tensor(np.array([[2.0, 0.0]]))
    # a positive gate shifts toward the bias argmax relative to main alone
    out = learned_mixin(m, b, Tensor([g])).data
    base = learned_mixin(m, b, Tensor([-800.0])).data
    assert (out[0, 0] - out[0, 1]) > (base[0, 0] - base[0, 1]) - 1e-12


def test_learned_mixin_gate_gradient(rng):
    m = Tensor(rng.normal(size=(4, 3)))
    b = Tensor(rng.normal(size=(4, 3)))
    gate = Tensor.param([0.3])
    y = [0, 1, 2, 1]
    build = lambda: cross_entropy(learned_mixin(m, b, gate), y)
    (g,) = analytic_grads(build, [gate])
    assert rel_err(g, central_difference(lambda: build().item(), gate.data)) < 1e-4


# counterfactual


def test_cf_examples(rng):
    m, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    te = cf_combine(Tensor(m), Tensor(b)).data
    np.testing.assert_array_equal(cf_debias_infer(te, b, 0.0), te)
    flat = np.full((4, 5), 0.7)
    te_flat = cf_combine(Tensor(m), Tensor(flat)).data
    for c in (0.0, 0.5, 1.0, 3.0):
        np.testing.assert_array_equal(cf_debias_infer(te_flat, flat, c).argmax(1), m.argmax(1))
    with pytest.raises(ConfigError):
        cf_debias_infer(te, b, -0.1)


def test_cf_harmonic_fusion_is_log_of_ratio(rng):
    m, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    s = 1 / (1 + np.exp(-m)) / (1 + np.exp(-b))
    np.testing.assert_allclose(cf_combine(Tensor(m), Tensor(b), "harmonic").data, np.log(s / (1 + s)), atol=1e-12)
    with pytest.raises(ConfigError):
        cf_combine(Tensor(m), Tensor(b), "product")


def test_cf_full_inference_subtracts_bias(rng):
    m, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    np.testing.assert_allclose(infer_logits("cf_full", m, b, c=1.0), m, atol=1e-12)
    np.testing.assert_allclose(infer_logits("cf_full", m, b, c=0.0), m + b, atol=1e-12)


def test_cf_variant_inference_uses_constant_head(rng):
    m, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    const = rng.normal(size=4)
    out = infer_logits("cf_variant", m, b, c=1.0, cf_const=const)
    np.testing.assert_allclose(out, m - const, atol=1e-12)
    with pytest.raises(ConfigError):
        infer_logits("cf_full", m)


# combine


@pytest.mark.parametrize("kind", list(StrategyKind))
def test_combine_shapes_and_aux(kind, rng):
    main = Tensor.param(rng.normal(size=(3, 4)))
    bias = Tensor.param(rng.normal(size=(3, 4)))
    out = combine(kind, main, bias, Tensor.param([0.0]), Tensor.param(np.zeros(4)))
    assert out.scores.shape == (3, 4)
    assert len(out.aux) == {"none": 0, "cf_variant": 2}.get(kind.value, 1)


@pytest.mark.parametrize("kind", ["bias_product", "learned_mixin"])
def test_product_objectives_do_not_train_bias_through_product(kind, rng):
    main = Tensor.param(rng.normal(size=(3, 4)))
    bias = Tensor.param(rng.normal(size=(3, 4)))
    y = [0, 1, 3]
    with Tape() as tape:
        loss = cross_entropy(combine(kind, main, bias, Tensor.param([0.0])).scores, y)
    backward(tape, loss)
    assert not bias.grad.any() and main.grad.any()


def test_cf_variant_constant_head_trains_only_through_counterfactual(rng):
    main = Tensor.param(rng.normal(size=(3, 4)))
    bias = Tensor.param(rng.normal(size=(3, 4)))
    const = Tensor.param(np.zeros(4))
    y = [0, 1, 3]
    with Tape() as tape:
        out = combine("cf_variant", main, bias, cf_const=const)
        loss = cross_entropy(out.aux[1], y)
    backward(tape, loss)
    assert const.grad.any() and not bias.grad.any() and not main.grad.any()


def test_combine_requires_extra_params(rng):
    m = Tensor(rng.normal(size=(2, 3)))
    with pytest.raises(ConfigError):
        combine("learned_mixin", m, m)
    with pytest.raises(ConfigError):
        combine("cf_variant", m, m)


@pytest.mark.parametrize("kind", ["none", "rubi", "bias_product", "learned_mixin"])
def test_main_only_inference_ignores_bias(kind, rng):
    m = rng.normal(size=(3, 4))
    a = infer_logits(kind, m, rng.normal(size=(3, 4)))
    b = infer_logits(kind, m, None)
    np.testing.assert_array_equal(a, m)
    np.testing.assert_array_equal(b, m)


def test_main_only_inference_branch_has_no_bias_reference():
    """Structural check: the early-return branch never names ``bias``."""
    src = textwrap.dedent(inspect.getsource(debias.infer_logits))
    fn = ast.parse(src).body[0]
    first_if = next(n for n in fn.body if isinstance(n, ast.If))
    assert "LEARNED_MIXIN" in ast.unparse(first_if.test)
    names = {n.id for n in ast.walk(first_if) if isinstance(n, ast.Name)}
    assert "bias" not in names and "b" not in names


# gradient ratio


def test_gradient_ratio_bound_random_triples():
    r = np.random.default_rng(7)
    p_b, p_d, g = (r.uniform(1e-9, 1 - 1e-9, size=100_000) for _ in range(3))
    assert np.all(gradient_ratio(p_b, p_d, g) <= 1.0)


def test_gradient_ratio_equality_limits():
    assert gradient_ratio(0.3, 0.4, 1.0) == pytest.approx(1.0)
    assert gradient_ratio(0.3, 1 - 1e-12, 0.5) == pytest.approx(1.0, abs=1e-9)
    assert gradient_ratio(0.3, 0.4, 0.5) < 1.0
