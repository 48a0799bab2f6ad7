"""Adam update arithmetic and the warmup learning-rate schedule."""

import math

import numpy as np
import pytest

from narem.autodiff import parameter
from narem.optim import AdamState, DivergenceError, adam_step, zero_gradients


def test_learning_rate_schedule_closed_form():
    state = AdamState([], peak_lr=2.0, warmup_steps=100)
    for step in (1, 10, 100, 400):
        expect = 2.0 * min(step**-0.5, step * 100**-1.5)
        assert state.learning_rate(step) == pytest.approx(expect)


def test_warmup_is_linear_then_decays():
    state = AdamState([], peak_lr=1.0, warmup_steps=50)
    ramp = [state.learning_rate(s) for s in range(1, 51)]
    assert all(b > a for a, b in zip(ramp, ramp[1:]))
    assert state.learning_rate(50) == pytest.approx(50**-0.5)
    decay = [state.learning_rate(s) for s in range(50, 200)]
    assert all(b < a for a, b in zip(decay, decay[1:]))


def test_first_step_closed_form():
    # With bias correction, step 1 moves by -lr * g / (|g| + eps) elementwise.
    p = parameter(np.array([[1.0, -2.0]]), "p")
    p.grad = np.array([[0.5, -3.0]])
    state = AdamState([p], peak_lr=1.0, warmup_steps=1)
    adam_step(state)
    lr = state.learning_rate(1)
    expect = np.array([[1.0, -2.0]]) - lr * np.array([[0.5, -3.0]]) / (
        np.abs([[0.5, -3.0]]) + 1e-9
    )
    np.testing.assert_allclose(p.data, expect, rtol=1e-7)


def test_two_steps_match_manual_recurrence():
    g1 = np.array([[0.3, -0.7]])
    g2 = np.array([[-0.2, 0.4]])
    p = parameter(np.zeros((1, 2)), "p")
    state = AdamState([p], peak_lr=0.1, warmup_steps=4)
    m = np.zeros((1, 2))
    v = np.zeros((1, 2))
    x = np.zeros((1, 2))
    for step, g in ((1, g1), (2, g2)):
        p.grad = g.copy()
        adam_step(state)
        m = 0.9 * m + 0.1 * g
        v = 0.98 * v + 0.02 * g * g
        lr = 0.1 * min(step**-0.5, step * 4**-1.5)
        x = x - lr * (m / (1 - 0.9**step)) / (np.sqrt(v / (1 - 0.98**step)) + 1e-9)
    np.testing.assert_allclose(p.data, x, atol=1e-12)


def test_none_gradient_skipped():
    p = parameter(np.ones((1, 1)), "p")
    p.grad = None
    state = AdamState([p])
    adam_step(state)
    np.testing.assert_allclose(p.data, 1.0)


def test_non_finite_gradient_raises_with_name():
    p = parameter(np.ones((1, 1)), "weird")
    p.grad = np.array([[np.nan]])
    with pytest.raises(DivergenceError, match="weird"):
        adam_step(AdamState([p]))


def test_zero_gradients():
    p = parameter(np.ones((2,)), "p")
    p.grad = np.ones((2,))
    zero_gradients([p])
    assert p.grad is None or not np.any(p.grad)


def test_converges_on_quadratic():
    # Minimize (x - 3)^2; Adam should get close within a few hundred steps.
    p = parameter(np.array([[10.0]]), "x")
    state = AdamState([p], peak_lr=0.3, warmup_steps=10)
    for _ in range(2000):
        p.grad = 2.0 * (p.data - 3.0)
        adam_step(state)
    assert abs(float(p.data[0, 0]) - 3.0) < 1e-2
