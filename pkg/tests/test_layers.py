import math

import mpmath

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tsnodule.layers import (AdamState, BatchNormState, DropoutSpec, adam_step, batchnorm3d, batchnorm_backward,
                             batchnorm_forward, bce_with_logits, dropout, relu, relu_backward, sigmoid)


def test_batchnorm_eval_identity():
    st_ = BatchNormState.fresh(3, np.float64, eps=0.0)
    x = np.random.default_rng(0).standard_normal((2, 3, 2, 2, 2))
    y, _ = batchnorm3d(x, st_, train=False)
    assert np.array_equal(y, x)


def test_batchnorm_constant_input_normalizes_to_zero():
    st_ = BatchNormState.fresh(2, np.float64)
    y, _ = batchnorm3d(np.full((3, 2, 2, 2, 2), 7.0), st_, train=True)
    assert np.all(y == 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_batchnorm_train_normalizes(n, c, seed):
    x = np.random.default_rng(seed).normal(3.0, 2.0, (n, c, 3, 2, 2))
    y, _ = batchnorm3d(x, BatchNormState.fresh(c, np.float64), train=True)
    assert np.all(np.abs(y.mean(axis=(0, 2, 3, 4))) < 1e-6)
    assert np.all(np.abs(y.var(axis=(0, 2, 3, 4)) - 1) < 1e-4)


def test_batchnorm_running_stats_ema_biased_variance():
    x = np.random.default_rng(1).standard_normal((4, 2))
    state = BatchNormState.fresh(2, np.float64)
    batchnorm3d(x, state, train=True)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(0))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(0))
    assert np.all(state.running_var >= 0)


def test_batchnorm_single_value_per_channel_rejected():
    with pytest.raises(ValueError):
        batchnorm3d(np.zeros((1, 3)), BatchNormState.fresh(3), train=True)


def test_batchnorm_backward_dtype_follows_upstream():
    x = np.random.default_rng(2).standard_normal((4, 3)).astype(np.float32)
    _, cache = batchnorm_forward(x, np.ones(3, np.float32), np.zeros(3, np.float32), np.zeros(3), np.ones(3),
                                 train=True, update_stats=False)
    assert batchnorm_backward(np.ones((4, 3), np.float32), cache)[0].dtype == np.float32
    assert batchnorm_backward(np.ones((4, 3)), cache)[0].dtype == np.float64


def test_relu_examples():
    x = np.array([-1.0, 0.0, 2.0])
    assert relu(x).tolist() == [0.0, 0.0, 2.0]
    assert relu_backward(np.ones(3), x).tolist() == [0.0, 0.0, 1.0]


def test_dropout_identity_cases():
    x = np.random.default_rng(0).standard_normal(100)
    assert dropout(x, DropoutSpec(0.0, True))[0] is x
    assert dropout(x, DropoutSpec(0.3, False))[0] is x
    for bad in (-0.1, 1.0):
        with pytest.raises(ValueError):
            DropoutSpec(bad)


def test_dropout_bernoulli_statistics():
    y, _ = dropout(np.ones(10 ** 6), DropoutSpec(0.3, True, (4,)))
    assert abs(np.mean(y == 0) - 0.3) < 0.005
    assert np.allclose(y[y != 0], 1 / 0.7)


def test_dropout_preserves_expectation():
    x = np.random.default_rng(9).uniform(0.5, 1.5, 8)
    acc = np.zeros_like(x)
    n = 10 ** 5
    for s in range(0, n, 1000):
        # one draw of 1000 independent masks per call, seeded by the block index
        y, _ = dropout(np.broadcast_to(x, (1000, 8)).copy(), DropoutSpec(0.3, True, (s,)))
        acc += y.sum(0)
    assert abs((acc / n).mean() - x.mean()) < 0.01 * x.mean()


def test_dropout_stream_determinism():
    x = np.ones(50)
    a, _ = dropout(x, DropoutSpec(0.5, True, (1, 2)))
    b, _ = dropout(x, DropoutSpec(0.5, True, (1, 2)))
    c, _ = dropout(x, DropoutSpec(0.5, True, (1, 3)))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_bce_examples():
    assert math.isclose(bce_with_logits(np.array([0.0]), np.array([1.0]))[0], math.log(2), rel_tol=1e-12)
    assert bce_with_logits(np.array([50.0]), np.array([1.0]))[0] < 1e-20
    loss, g = bce_with_logits(np.array([-1000.0]), np.array([0.0]))
    assert loss == 0.0 and np.isfinite(g).all()
    with pytest.raises(ValueError):
        bce_with_logits(np.array([0.0]), np.array([0.5]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)), st.integers(0, 255))
def test_bce_matches_naive_form(z, bits):
    y = np.array([(bits >> (i % 8)) & 1 for i in range(z.size)], dtype=np.float64)
    # the literal formula at 50 digits, so 1 - sigmoid keeps its precision
    with mpmath.workdps(50):
        terms = []
        for zi, yi in zip(z.tolist(), y.tolist()):
            p = 1 / (1 + mpmath.exp(-mpmath.mpf(zi)))
            terms.append(-(yi * mpmath.log(p) + (1 - yi) * mpmath.log(1 - p)))
        ref = float(mpmath.fsum(terms) / len(terms))
    assert abs(bce_with_logits(z, y)[0] - ref) <= 1e-10 * max(1.0, ref)


def test_sigmoid_extremes():
    s = sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert s.tolist() == [0.0, 0.5, 1.0]


def test_adam_examples():
    p = {"w": np.ones(4)}
    st_ = AdamState(lr=1e-3)
    adam_step(p, {"w": np.zeros(4)}, st_)
    assert np.array_equal(p["w"], np.ones(4))

    p = {"w": np.zeros(3)}
    st_ = AdamState(lr=1e-3)
    adam_step(p, {"w": np.ones(3)}, st_)
    np.testing.assert_allclose(p["w"], -1e-3 / (1 + 1e-8), rtol=1e-12)
    adam_step(p, {"w": np.ones(3)}, st_)
    np.testing.assert_allclose(p["w"], -2e-3, rtol=1e-7)
    assert st_.step_count == 2 and all(np.all(v >= 0) for v in st_.v.values())


def test_adam_rejects_non_finite_gradient_by_name():
    with pytest.raises(FloatingPointError, match="layer.w"):
        adam_step({"layer.w": np.zeros(2)}, {"layer.w": np.array([1.0, np.nan])}, AdamState())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_adam_partition_invariance(seed, steps):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(5), rng.standard_normal((2, 3))
    grouped = {"a": a.copy(), "b": b.copy()}
    flat = {"all": np.concatenate([a, b.ravel()])}
    sg, sf = AdamState(lr=1e-2), AdamState(lr=1e-2)
    for _ in range(steps):
        ga, gb = rng.standard_normal(5), rng.standard_normal((2, 3))
        adam_step(grouped, {"a": ga, "b": gb}, sg)
        adam_step(flat, {"all": np.concatenate([ga, gb.ravel()])}, sf)
    assert np.array_equal(flat["all"], np.concatenate([grouped["a"], grouped["b"].ravel()]))
