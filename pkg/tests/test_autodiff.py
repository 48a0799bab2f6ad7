"""Reverse-mode differentiation core: forward values against closed forms
and gradients against central finite differences."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from narem.autodiff import (
    Tensor,
    cross_entropy_ls,
    masked_token_loss,
    parameter,
)

RNG = np.random.default_rng(0)


def fd_grad(build_loss, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. every entry of x."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        hi = build_loss()
        x[i] = orig - h
        lo = build_loss()
        x[i] = orig
        g[i] = (hi - lo) / (2 * h)
        it.iternext()
    return g


def check_op(make_output, *arrays, tol=1e-6):
    """Backprop through make_output(*tensors).sum() vs finite differences."""
    tensors = [parameter(a.copy(), f"p{i}") for i, a in enumerate(arrays)]
    out = make_output(*tensors)
    loss = out.sum() if out.data.ndim else out
    loss.backward()
    for t, a in zip(tensors, arrays):
        def scalar():
            fresh = [parameter(b.data.copy(), "x") for b in tensors]
            o = make_output(*fresh)
            return float((o.sum() if o.data.ndim else o).data)

        # Differentiate w.r.t. this tensor's live buffer.
        def scalar_at():
            o = make_output(*[Tensor(b.data, requires_grad=False) for b in tensors])
            return float((o.sum() if o.data.ndim else o).data)

        num = fd_grad(scalar_at, t.data)
        np.testing.assert_allclose(t.grad, num, rtol=tol, atol=tol)


class TestForwardValues:
    def test_softmax_closed_form(self):
        # softmax([ln1, ln2, ln3]) = [1/6, 2/6, 3/6].
        x = Tensor(np.log(np.array([[1.0, 2.0, 3.0]])))
        np.testing.assert_allclose(x.softmax().data, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-12)

    def test_log_softmax_matches_softmax(self):
        x = Tensor(RNG.normal(size=(4, 7)))
        np.testing.assert_allclose(np.exp(x.log_softmax().data), x.softmax().data, atol=1e-12)

    def test_softmax_shift_invariance(self):
        x = RNG.normal(size=(3, 5))
        a = Tensor(x).softmax().data
        b = Tensor(x + 1000.0).softmax().data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_layer_norm_statistics(self):
        x = Tensor(RNG.normal(size=(2, 3, 8)))
        g = parameter(np.ones((1, 8)), "g")
        b = parameter(np.zeros((1, 8)), "b")
        out = x.layer_norm(g, b).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-3)

    def test_label_smoothed_loss_hand_value(self):
        # probs [.7,.1,.1,.05,.05], target 0, eps=.1, V=5:
        # loss = -(0.9 ln .7 + 0.025 (ln .1 + ln .1 + ln .05 + ln .05)).
        probs = np.array([[0.7, 0.1, 0.1, 0.05, 0.05]])
        logits = parameter(np.log(probs), "l")
        loss = cross_entropy_ls(logits, np.array([0]), epsilon=0.1)
        expect = -(0.9 * math.log(0.7) + 0.025 * (2 * math.log(0.1) + 2 * math.log(0.05)))
        assert float(loss.data) == pytest.approx(expect, abs=1e-12)

    def test_zero_smoothing_is_plain_nll(self):
        probs = np.array([[0.2, 0.5, 0.3]])
        logits = parameter(np.log(probs), "l")
        loss = cross_entropy_ls(logits, np.array([1]), epsilon=0.0)
        assert float(loss.data) == pytest.approx(-math.log(0.5), abs=1e-12)

    def test_masked_token_loss_ignores_padding(self):
        logits = parameter(RNG.normal(size=(2, 4, 6)), "l")
        targets = np.array([[1, 2, 3, 0], [4, 5, 0, 0]])
        mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]])
        full = masked_token_loss(logits, targets, mask, 0.1)
        # Changing a masked-out logit row must not change the loss.
        bumped = logits.data.copy()
        bumped[0, 3] += 100.0
        full2 = masked_token_loss(parameter(bumped, "l"), targets, mask, 0.1)
        assert float(full.data) == pytest.approx(float(full2.data))

    def test_masked_token_loss_is_mean_over_valid(self):
        logits_data = RNG.normal(size=(1, 3, 4))
        targets = np.array([[2, 1, 0]])
        mask = np.array([[1, 1, 0]])
        got = masked_token_loss(parameter(logits_data, "l"), targets, mask, 0.0)
        logp = logits_data - np.log(np.exp(logits_data).sum(-1, keepdims=True))
        expect = -(logp[0, 0, 2] + logp[0, 1, 1]) / 2
        assert float(got.data) == pytest.approx(expect, abs=1e-10)


class TestGradients:
    def test_add_broadcast(self):
        check_op(lambda a, b: a + b, RNG.normal(size=(3, 4)), RNG.normal(size=(1, 4)))

    def test_mul_broadcast(self):
        check_op(lambda a, b: a * b, RNG.normal(size=(2, 3)), RNG.normal(size=(3,)))

    def test_sub_and_neg(self):
        check_op(lambda a, b: a - (-b), RNG.normal(size=(3,)), RNG.normal(size=(3,)))

    def test_matmul_batched(self):
        check_op(
            lambda a, b: a.matmul(b),
            RNG.normal(size=(2, 3, 4)),
            RNG.normal(size=(4, 5)),
        )

    def test_matmul_both_batched(self):
        check_op(
            lambda a, b: a.matmul(b),
            RNG.normal(size=(2, 2, 3, 4)),
            RNG.normal(size=(2, 2, 4, 3)),
        )

    def test_reshape_moveaxis_transpose(self):
        check_op(
            lambda a: a.reshape(2, 2, 3).moveaxis(2, 1).transpose_last(),
            RNG.normal(size=(4, 3)),
        )

    def test_relu(self):
        # Keep entries away from the kink.
        x = RNG.normal(size=(5, 5))
        x[np.abs(x) < 0.05] = 0.1
        check_op(lambda a: a.relu(), x)

    def test_sum_axis_keepdims(self):
        check_op(lambda a: a.sum(axis=1, keepdims=True) * a, RNG.normal(size=(3, 4)))

    def test_mean(self):
        check_op(lambda a: a.mean(), RNG.normal(size=(3, 4)))

    def test_softmax(self):
        w = RNG.normal(size=(3, 5))
        check_op(lambda a: (a.softmax() * w).sum(), RNG.normal(size=(3, 5)), tol=1e-5)

    def test_log_softmax(self):
        w = RNG.normal(size=(3, 5))
        check_op(lambda a: (a.log_softmax() * w).sum(), RNG.normal(size=(3, 5)), tol=1e-5)

    def test_layer_norm(self):
        w = RNG.normal(size=(2, 4, 6))
        check_op(
            lambda a, g, b: (a.layer_norm(g, b) * w).sum(),
            RNG.normal(size=(2, 4, 6)),
            RNG.normal(size=(1, 6)),
            RNG.normal(size=(1, 6)),
            tol=1e-5,
        )

    def test_take_rows_accumulates_repeats(self):
        idx = np.array([[0, 1, 1], [2, 0, 0]])
        check_op(lambda a: a.take_rows(idx), RNG.normal(size=(3, 4)))

    def test_gather_last(self):
        idx = np.array([[0, 2], [1, 1]])
        check_op(lambda a: a.gather_last(idx), RNG.normal(size=(2, 2, 3)))

    def test_cross_entropy_ls_grad(self):
        t = np.array([1, 0, 3])
        check_op(lambda a: cross_entropy_ls(a, t, 0.1), RNG.normal(size=(3, 4)), tol=1e-5)

    def test_masked_token_loss_grad(self):
        tg = np.array([[1, 2, 0]])
        m = np.array([[1, 1, 0]])
        check_op(lambda a: masked_token_loss(a, tg, m, 0.1), RNG.normal(size=(1, 3, 4)), tol=1e-5)

    def test_grad_accumulates_across_uses(self):
        a = parameter(np.array([[1.0, 2.0]]), "a")
        ((a * 2.0) + (a * 3.0)).sum().backward()
        np.testing.assert_allclose(a.grad, [[5.0, 5.0]])

    def test_mul_const_masks_gradient(self):
        a = parameter(np.ones((2, 2)), "a")
        mask = np.array([[1.0, 0.0], [0.0, 1.0]])
        a.mul_const(mask).sum().backward()
        np.testing.assert_allclose(a.grad, mask)

    @given(
        hnp.arrays(
            np.float64,
            hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
            elements=st.floats(-3, 3),
        )
    )
    @settings(max_examples=30, deadline=None)
    def test_sum_grad_is_ones(self, x):
        a = parameter(x.copy(), "a")
        a.sum().backward()
        np.testing.assert_allclose(a.grad, np.ones_like(x))


class TestGraphMechanics:
    def test_backward_requires_scalar(self):
        a = parameter(np.ones((2, 2)), "a")
        with pytest.raises(ValueError):
            (a * 2.0).backward()

    def test_no_grad_tensor_stays_clean(self):
        a = Tensor(np.ones((2,)), requires_grad=False)
        b = parameter(np.ones((2,)), "b")
        (a * b).sum().backward()
        assert a.grad is None
        np.testing.assert_allclose(b.grad, [1.0, 1.0])

    def test_diamond_graph(self):
        # f = (a+a)*a = 2a^2, df/da = 4a.
        a = parameter(np.array([3.0]), "a")
        ((a + a) * a).sum().backward()
        np.testing.assert_allclose(a.grad, [12.0])
