"""The finite-difference gradient checker must accept correct gradients and
flag deliberately wrong ones."""

import numpy as np
import pytest

from narem.autodiff import Tensor, parameter
from narem.gradcheck import grad_check


def test_accepts_correct_gradient():
    p = parameter(np.random.default_rng(0).normal(size=(4, 4)), "p")
    report = grad_check(lambda: (p * p).sum(), [p], tolerance=1e-6, seed=1)
    assert report.ok(1e-6)
    assert report.checked == 5


def test_flags_wrong_gradient():
    p = parameter(np.random.default_rng(0).normal(size=(3, 3)), "p")

    def loss():
        # Forward computes sum(p^2) but the backward rule claims 3p, not 2p.
        def bwd(g):
            p._accumulate(g * 3.0 * p.data)

        return Tensor(np.asarray((p.data**2).sum()), parents=(p,), backward=bwd)

    with pytest.raises(AssertionError, match="gradient check failed"):
        grad_check(loss, [p], tolerance=1e-4, seed=0)
    report = grad_check(loss, [p], tolerance=1e-4, seed=0, raise_on_failure=False)
    assert not report.ok(1e-4)
    assert report.worst[0][0] == "p"


def test_samples_capped_by_size():
    p = parameter(np.ones((1, 2)), "p")
    report = grad_check(lambda: (p * p).sum(), [p], samples_per_param=10)
    assert report.checked == 2
