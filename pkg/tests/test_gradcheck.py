"""Finite-difference checker self-tests: it must catch broken gradients."""

import numpy as np
import pytest

from autocenet import autodiff as ad
from autocenet.autodiff import Tensor, _make
from autocenet.gradcheck import fd_check, standard_suites


def test_passes_on_correct_gradient():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    r = Tensor(rng.standard_normal((3, 4)))
    res = fd_check(lambda: ad.tensor_sum(ad.mul(ad.mul(x, x), r)), [("x", x)])
    assert res.ok, res.summary()
    assert res.max_rel <= 1e-3


def test_catches_wrong_gradient():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((3, 4)) + 2.0, requires_grad=True)

    def doubled_square(a):
        # deliberately wrong vjp: reports 4x instead of 2x
        return _make(a.data ** 2, (a,), lambda g: (4.0 * a.data * g,), "bad")

    res = fd_check(lambda: ad.tensor_sum(doubled_square(x)), [("x", x)])
    assert not res.ok
    assert len(res.failures) == res.entries.__len__()
    assert "FAIL" in res.summary()


def test_zero_gradient_uses_absolute_tolerance():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    res = fd_check(lambda: ad.tensor_sum(ad.mul(ad.mul(x, x), 0.5)), [("x", x)])
    assert res.ok  # analytic grad is exactly 0 at the origin


def test_reports_missing_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(AssertionError):
        fd_check(lambda: ad.tensor_sum(x), [("x", x), ("y", y)])


def test_nonsmooth_rejection_skips_kinks_but_keeps_count():
    rng = np.random.default_rng(2)
    # values within half a step of zero would make relu quotients lie
    vals = rng.standard_normal(64) * 2e-4
    x = Tensor(vals, requires_grad=True)
    r = Tensor(rng.standard_normal(64) + 1.5)
    naive = fd_check(lambda: ad.tensor_sum(ad.mul(ad.relu(x), r)),
                     [("x", x)], n_coords=40)
    assert not naive.ok  # quotients straddle the kink and disagree
    strict = fd_check(lambda: ad.tensor_sum(ad.mul(ad.relu(x), r)),
                      [("x", x)], n_coords=40, reject_nonsmooth=True)
    assert strict.ok, strict.summary()


def test_nonsmooth_rejection_still_fails_wrong_gradients():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((4, 4)) + 3.0, requires_grad=True)

    def off_by_half(a):
        return _make(3.0 * a.data, (a,), lambda g: (1.5 * g,), "bad")

    res = fd_check(lambda: ad.tensor_sum(off_by_half(x)), [("x", x)],
                   reject_nonsmooth=True)
    assert not res.ok


def test_standard_suites_cover_all_ops_and_pass():
    suites = standard_suites(seed=0)
    names = [n for n, _ in suites]
    assert len(names) == len(set(names))
    for want in ("conv3d", "transposed", "batchnorm", "skip-attention",
                 "v-transition", "relu", "clamp", "log", "channel"):
        assert any(want in n for n in names), want
    for name, runner in suites:
        res = runner()
        assert res.ok, f"{name}: {res.summary()}"
        assert len(res.entries) >= 20, name
