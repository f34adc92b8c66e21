from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualweaver.numerics import (
    RngStream,
    check_gradient,
    dropout_backward,
    dropout_forward,
    finite_diff_grad,
    layer_norm_backward,
    layer_norm_forward,
    rel_error,
    sigmoid,
    silu,
    silu_grad,
    streams,
)


def test_silu_anchors():
    assert silu(0.0) == 0.0
    assert abs(silu(20.0) - 20.0) < 1e-6
    assert abs(silu(1.0) - 1.0 / (1.0 + np.exp(-1.0))) < 1e-15
    assert abs(silu(1.0) - 0.731058) < 1e-6


def test_sigmoid_is_stable_at_extremes():
    s = sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0], atol=1e-300)


@given(st.floats(-30, 30))
def test_silu_grad_closed_form(x):
    s = 1.0 / (1.0 + np.exp(-x))
    assert abs(silu_grad(x) - s * (1 + x * (1 - s))) < 1e-12


def test_layer_norm_constant_and_centering():
    out, _ = layer_norm_forward(np.full(6, 3.5), np.ones(6), np.zeros(6))
    assert np.all(out == 0.0)
    v = np.random.default_rng(0).standard_normal(9)
    out, _ = layer_norm_forward(v, np.ones(9), np.zeros(9))
    assert abs(out.mean()) < 1e-12


def test_layer_norm_backward_matches_finite_differences():
    gen = np.random.default_rng(1)
    v = gen.standard_normal((3, 5))
    gamma = gen.standard_normal(5)
    beta = gen.standard_normal(5)
    G = gen.standard_normal((3, 5))
    _, cache = layer_norm_forward(v, gamma, beta)
    dv, dg, db = layer_norm_backward(cache, G)

    def loss(v_=v, g_=gamma, b_=beta):
        return float(np.sum(G * layer_norm_forward(v_, g_, b_)[0]))

    for name, analytic, f, theta in (
        ("v", dv, lambda t: loss(v_=t), v),
        ("gamma", dg, lambda t: loss(g_=t), gamma),
        ("beta", db, lambda t: loss(b_=t), beta),
    ):
        assert check_gradient(name, analytic, f, theta).max_rel_error < 1e-6


def test_dropout_identity_cases():
    m = np.arange(12.0).reshape(3, 4)
    out, mask = dropout_forward(m, 0.0, True, RngStream("dropout", 0))
    assert mask is None and np.array_equal(out, m)
    out, mask = dropout_forward(m, 0.7, False)
    assert mask is None and np.array_equal(out, m)
    assert np.array_equal(dropout_backward(None, m), m)


def test_dropout_survivor_fraction():
    rng = RngStream("dropout", 3)
    out, mask = dropout_forward(np.ones(10**6), 0.1, True, rng)
    frac = np.mean(mask > 0)
    assert abs(frac - 0.9) < 0.002
    # inverted dropout keeps the expectation
    assert np.allclose(out[mask > 0], 1 / 0.9)


def test_dropout_requires_valid_rate_and_rng():
    with pytest.raises(ValueError):
        dropout_forward(np.ones(3), 1.0, True, RngStream("dropout", 0))
    with pytest.raises(ValueError):
        dropout_forward(np.ones(3), 0.5, True, None)


def test_rng_stream_is_counter_addressed():
    a = RngStream("dropout", 7).at(3).generator(1).random(5)
    b = RngStream("dropout", 7, 3).generator(1).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, RngStream("dropout", 7).at(4).generator(1).random(5))
    assert not np.array_equal(a, RngStream("init", 7).at(3).generator(1).random(5))
    assert set(streams(0)) == {"init", "dropout", "data", "noise"}


def test_rng_streams_look_independent():
    a = RngStream("init", 0).generator().standard_normal(20000)
    b = RngStream("noise", 0).generator().standard_normal(20000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.03


def test_finite_diff_anchors():
    g = finite_diff_grad(lambda t: float(t[0] ** 2), np.array([3.0]))
    assert abs(g[0] - 6.0) < 1e-8
    assert np.all(finite_diff_grad(lambda t: 4.2, np.ones((2, 3))) == 0.0)
    g = finite_diff_grad(lambda t: float(silu(t[0])), np.array([1.0]))
    assert abs(g[0] - silu_grad(1.0)) < 1e-7


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda t: 0.0, np.ones(1), h=0.0)


def test_rel_error_floor_of_one():
    assert rel_error(1e-9, 2e-9) == pytest.approx(1e-9)
    assert rel_error(100.0, 101.0) == pytest.approx(1 / 101)


def test_check_gradient_reports_worst_coordinate():
    theta = np.array([[1.0, 2.0], [3.0, 4.0]])
    analytic = 2 * theta
    analytic[1, 0] += 0.5
    rep = check_gradient("sq", analytic, lambda t: float(np.sum(t ** 2)), theta)
    assert rep.worst_param_index == (1, 0)
    assert rep.max_rel_error >= 0 and not rep.passed(1e-4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_eval_mode_ops_are_deterministic(seed):
    v = np.random.default_rng(seed).standard_normal((4, 6))
    a = layer_norm_forward(v, np.ones(6), np.zeros(6))[0]
    b = layer_norm_forward(v, np.ones(6), np.zeros(6))[0]
    assert np.array_equal(a, b)
    assert np.array_equal(silu(v), silu(v))
