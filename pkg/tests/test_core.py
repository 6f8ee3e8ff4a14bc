import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stilt_bench import core
from stilt_bench.core import EVAL, TRAIN, DeterministicRng, NormState, ParamTensor
from stilt_bench.errors import BatchSizeError, ConfigError, DimensionError, EvaluationError

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_affine_identity():
    x = np.array([[1.0, 2.0]])
    W = ParamTensor(np.eye(2))
    b = ParamTensor(np.zeros((1, 2)))
    np.testing.assert_array_equal(core.affine(x, W, b), [[1.0, 2.0]])


def test_affine_dot_product():
    out = core.affine(np.array([[1.0, 1.0]]), ParamTensor([[2.0], [3.0]]), ParamTensor([[1.0]]))
    assert out.tolist() == [[6.0]]


def test_affine_weight_gradient_of_sum():
    x = np.array([[1.0, 2.0]])
    W = ParamTensor([[0.3], [-0.7]])
    b = ParamTensor([[0.1]])
    out = core.affine(x, W, b)
    core.affine_backward(np.ones_like(out), x, W, b)
    np.testing.assert_array_equal(W.grad, [[1.0], [2.0]])
    np.testing.assert_array_equal(b.grad, [[1.0]])

    def f():
        return core.affine(x, W, b).sum()

    assert core.finite_difference_check(f, [W, b], h=1e-5) < 1e-9


def test_affine_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
        core.affine(np.zeros((1, 3)), ParamTensor(np.zeros((2, 2))), ParamTensor(np.zeros((1, 2))))


def test_gelu_zero_and_known_value():
    assert core.gelu(np.zeros((1, 1)))[0, 0] == 0.0
    x = np.array([[1.0]])
    expected = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    assert core.gelu(x)[0, 0] == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("row,expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([math.log(2.0), 0.0], [2 / 3, 1 / 3]),
])
def test_softmax_examples(row, expected):
    np.testing.assert_allclose(core.softmax_row(np.array([row])), [expected], rtol=0, atol=1e-15)


@given(arrays(np.float64, (4, 3), elements=st.floats(-300, 300)))
def test_softmax_rows_are_distributions(x):
    y = core.softmax_row(x)
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("fwd,bwd,use_output", [
    (core.gelu, core.gelu_backward, False),
    (core.tanh_act, core.tanh_backward, True),
    (core.softmax_row, core.softmax_row_backward, True),
])
def test_activation_backward_matches_finite_differences(fwd, bwd, use_output):
    r = DeterministicRng(0)
    x = ParamTensor(r.normal(size=(3, 4)))
    g = r.normal(size=(3, 4))
    y = fwd(x.value)
    x.grad = bwd(g, y if use_output else x.value)
    err = core.finite_difference_check(lambda: (fwd(x.value) * g).sum(), [x], h=1e-5)
    assert err < 1e-7


def test_dropout_degenerate_and_eval(rng):
    x = rng.normal(size=(5, 7))
    y, mask = core.dropout(x, 0.0, TRAIN, rng)
    assert y is x and mask is None
    y, mask = core.dropout(x, 0.5, EVAL, rng)
    assert y is x and mask is None


def test_dropout_rejects_rate_one(rng):
    with pytest.raises(ConfigError):
        core.dropout(np.ones((2, 2)), 1.0, TRAIN, rng)


def test_dropout_mean_preserved_monte_carlo():
    x = np.array([0.5, -1.0, 2.0, 3.0])
    trials = 100_000
    tiled = np.tile(x, (trials, 1))
    y, mask = core.dropout(tiled, 0.5, TRAIN, DeterministicRng(11))
    mean = y.mean(axis=0)
    # per-trial output is 2x or 0 -> std |x|, so the mean's std is |x| / sqrt(trials)
    sigma = np.abs(x) / math.sqrt(trials)
    assert np.all(np.abs(mean - x) < 3 * sigma)
    # backward reuses the exact mask
    np.testing.assert_array_equal(core.dropout_backward(np.ones_like(tiled), mask), mask)


def test_dropout_mask_reproducible():
    x = np.ones((4, 4))
    a, _ = core.dropout(x, 0.3, TRAIN, DeterministicRng(3))
    b, _ = core.dropout(x, 0.3, TRAIN, DeterministicRng(3))
    np.testing.assert_array_equal(a, b)


def test_batch_norm_train_normalizes(rng):
    state = NormState.create(5)
    x = rng.normal(3.0, 2.0, size=(16, 5))
    y, _ = core.batch_norm(x, state, TRAIN)
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-9)
    # variance is 1 up to the eps term in the denominator
    var = x.var(axis=0)
    np.testing.assert_allclose(y.var(axis=0), var / (var + 1e-5), atol=1e-12)
    np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-5)


def test_batch_norm_zero_variance_column_is_beta():
    state = NormState.create(1)
    state.gamma.value[:] = 2.0
    state.beta.value[:] = 3.0
    y, _ = core.batch_norm(np.full((4, 1), 7.0), state, TRAIN)
    np.testing.assert_array_equal(y, 3.0)


def test_batch_norm_eval_formula(rng):
    state = NormState.create(3)
    x = rng.normal(size=(4, 3))
    y, _ = core.batch_norm(x, state, EVAL)
    np.testing.assert_allclose(y, x / math.sqrt(1 + 1e-5), rtol=1e-15)


def test_batch_norm_running_stats_update(rng):
    state = NormState.create(2)
    x = rng.normal(size=(8, 2))
    core.batch_norm(x, state, TRAIN)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=0, keepdims=True))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1, keepdims=True))


def test_batch_norm_needs_two_rows():
    with pytest.raises(BatchSizeError):
        core.batch_norm(np.ones((1, 3)), NormState.create(3), TRAIN)


@pytest.mark.parametrize("mode", [TRAIN, EVAL])
def test_batch_norm_backward(mode):
    r = DeterministicRng(8)
    state = NormState.create(3)
    state.gamma.value[:] = r.normal(size=(1, 3))
    state.beta.value[:] = r.normal(size=(1, 3))
    state.running_mean = r.normal(size=(1, 3))
    state.running_var = r.uniform(0.5, 2.0, (1, 3))
    x = ParamTensor(r.normal(size=(5, 3)))
    g = r.normal(size=(5, 3))

    def f():
        return (core.batch_norm(x.value, state, mode, update_running=False)[0] * g).sum()

    _, cache = core.batch_norm(x.value, state, mode, update_running=False)
    x.grad = core.batch_norm_backward(g, cache, state)
    err = core.finite_difference_check(f, [x, state.gamma, state.beta], h=1e-5)
    assert err < 1e-7


def test_finite_difference_quadratic():
    theta = ParamTensor([[3.0]])
    theta.grad[:] = 6.0
    err = core.finite_difference_check(lambda: theta.value[0, 0] ** 2, [theta], h=1e-5)
    assert err < 1e-9


def test_finite_difference_skips_frozen():
    theta = ParamTensor([[3.0]], trainable=False)
    assert core.finite_difference_check(lambda: theta.value[0, 0] ** 2, [theta]) == 0.0


def test_finite_difference_non_finite_objective():
    theta = ParamTensor([[0.0]])
    with pytest.raises(EvaluationError):
        core.finite_difference_check(lambda: float("nan"), [theta])


def test_frozen_param_never_accumulates():
    p = ParamTensor(np.ones((2, 2)), trainable=False)
    p.accumulate(np.ones((2, 2)))
    assert not p.grad.any()


def test_rng_streams():
    a = DeterministicRng(5).spawn(1).random(4)
    b = DeterministicRng(5).spawn(1).random(4)
    c = DeterministicRng(5).spawn(2).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


@settings(max_examples=25)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_affine_backward_property(x):
    r = DeterministicRng(1)
    W = ParamTensor(r.normal(size=(4, 2)))
    b = ParamTensor(r.normal(size=(1, 2)))
    xp = ParamTensor(x)
    g = r.normal(size=(3, 2))
    xp.grad = core.affine_backward(g, xp.value, W, b)

    def f():
        return (core.affine(xp.value, W, b) * g).sum()

    # f is linear in every coordinate, so a large step has no truncation error
    assert core.finite_difference_check(f, [xp, W, b], h=1e-2) < 1e-6


def test_tanh_range_is_open_for_large_inputs():
    y = core.tanh_act(np.array([[-1e3, -25.0, 0.0, 25.0, 1e3]]))
    assert np.all(np.abs(y) < 1.0)
    assert y[0, 2] == 0.0
