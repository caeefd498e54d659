"""Finite-difference validation of analytic gradients.

Central differences in float64 with a fixed step, compared coordinate by
coordinate against backward(). A coordinate passes when the relative error
is small, or the absolute error is small where the analytic gradient is
essentially zero. standard_suites() bundles one check per differentiable
op plus the two composite blocks; the CLI and the acceptance tests both
run it.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward


class GradCheckResult:
    """Outcome of one finite-difference sweep."""

    def __init__(self):
        self.entries = []
        self.failures = []

    @property
    def ok(self):
        return not self.failures

    @property
    def max_rel(self):
        return max((e[4] for e in self.entries), default=0.0)

    def add(self, name, index, analytic, numeric, rel, passed):
        entry = (name, index, analytic, numeric, rel, passed)
        self.entries.append(entry)
        if not passed:
            self.failures.append(entry)

    def summary(self):
        lines = [f"checked {len(self.entries)} coordinates, "
                 f"max relative error {self.max_rel:.3e}"]
        for name, index, ana, num, rel, _ in self.failures:
            lines.append(f"  FAIL {name}[{index}] analytic={ana:.6e} "
                         f"numeric={num:.6e} rel={rel:.3e}")
        return "\n".join(lines)


def fd_check(loss_fn, named_tensors, n_coords=20, step=1e-3,
             rel_tol=1e-3, abs_tol=1e-6, rng=None, reject_nonsmooth=False):
    """Compare backward() gradients of loss_fn against central differences.

    loss_fn rebuilds the scalar loss from the tensors' current .data, so it
    is called fresh for every perturbation. Tensors should hold float64 data
    for the tolerances to be meaningful.

    With reject_nonsmooth, coordinates whose full-step and half-step central
    differences disagree are resampled: there the perturbation crosses a
    relu-style kink, so the quotient does not estimate the derivative at
    the base point. A wrong analytic gradient still fails, because at
    smooth coordinates both quotients agree on the true derivative.
    """
    rng = rng or np.random.default_rng(0)
    tensors = [t for _, t in named_tensors]
    for t in tensors:
        t.zero_grad()
    loss = loss_fn()
    backward(loss)

    def central(flat, idx, h):
        saved = flat[idx]
        flat[idx] = saved + h
        f_plus = loss_fn().item()
        flat[idx] = saved - h
        f_minus = loss_fn().item()
        flat[idx] = saved
        return (f_plus - f_minus) / (2.0 * h)

    result = GradCheckResult()
    for name, t in named_tensors:
        if t.grad is None:
            raise AssertionError(f"{name} received no gradient")
        flat = t.data.reshape(-1)
        size = flat.size
        k = min(n_coords, size)
        order = rng.permutation(size)
        checked = 0
        for idx in order:
            if checked >= k:
                break
            idx = int(idx)
            numeric = central(flat, idx, step)
            if reject_nonsmooth:
                half = central(flat, idx, step / 2.0)
                tol = 1e-3 * max(abs(numeric), abs(half)) + 1e-8
                if abs(numeric - half) > tol:
                    continue
            checked += 1
            analytic = float(t.grad.reshape(-1)[idx])
            denom = max(abs(analytic), abs(numeric))
            rel = abs(analytic - numeric) / denom if denom > 0 else 0.0
            if abs(analytic) < abs_tol:
                passed = abs(analytic - numeric) <= abs_tol
            else:
                passed = rel <= rel_tol
            result.add(name, idx, analytic, numeric, rel, passed)
    return result


# ---------------------------------------------------------------------------
# canonical op and block suites (float64 throughout)


def _leaf(rng, shape, offset=0.0, scale=1.0):
    return Tensor(offset + scale * rng.standard_normal(shape),
                  requires_grad=True)


def _projection(rng, shape):
    """Fixed random weighting that turns a tensor into a scalar loss."""
    return Tensor(rng.standard_normal(shape))


def standard_suites(seed=0):
    """(name, runner) pairs; each runner returns a GradCheckResult."""
    suites = []

    def register(name):
        def wrap(fn):
            suites.append((name, fn))
            return fn
        return wrap

    @register("elementwise-arith")
    def _arith():
        rng = np.random.default_rng(seed)
        a = _leaf(rng, (2, 3, 4))
        b = _leaf(rng, (3, 4))
        c = _leaf(rng, (2, 3, 4), offset=3.0, scale=0.3)
        r = _projection(rng, (2, 3, 4))
        loss_fn = lambda: ad.tensor_sum(
            ad.mul(ad.add(ad.mul(a, b), ad.div(ad.sub(a, b), c)), r))
        return fd_check(loss_fn, [("a", a), ("b", b), ("c", c)],
                        rng=np.random.default_rng(seed + 1))

    @register("relu")
    def _relu():
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal((2, 3, 4, 2))
        raw = np.sign(raw) * (0.1 + np.abs(raw))  # keep clear of the kink
        x = Tensor(raw, requires_grad=True)
        r = _projection(rng, raw.shape)
        loss_fn = lambda: ad.tensor_sum(ad.mul(ad.relu(x), r))
        return fd_check(loss_fn, [("x", x)], rng=np.random.default_rng(seed + 1))

    @register("log")
    def _log():
        rng = np.random.default_rng(seed)
        x = Tensor(0.5 + np.abs(rng.standard_normal((3, 4, 2))),
                   requires_grad=True)
        r = _projection(rng, x.shape)
        loss_fn = lambda: ad.tensor_sum(ad.mul(ad.log(x), r))
        return fd_check(loss_fn, [("x", x)], rng=np.random.default_rng(seed + 1))

    @register("clamp")
    def _clamp():
        rng = np.random.default_rng(seed)
        inside = Tensor(rng.uniform(-0.8, 0.8, size=(3, 4, 2)),
                        requires_grad=True)
        outside = Tensor(np.sign(rng.standard_normal((3, 4)))
                         * (1.3 + 0.5 * np.abs(rng.standard_normal((3, 4)))),
                         requires_grad=True)
        r1 = _projection(rng, inside.shape)
        r2 = _projection(rng, outside.shape)
        loss_fn = lambda: ad.add(
            ad.tensor_sum(ad.mul(ad.clamp(inside, -1.0, 1.0), r1)),
            ad.tensor_sum(ad.mul(ad.clamp(outside, -1.0, 1.0), r2)))
        return fd_check(loss_fn, [("inside", inside), ("outside", outside)],
                        rng=np.random.default_rng(seed + 1))

    @register("sum")
    def _sum():
        rng = np.random.default_rng(seed)
        x = _leaf(rng, (4, 3, 2))
        loss_fn = lambda: ad.tensor_sum(ad.mul(ad.tensor_sum(x), ad.tensor_sum(x)))
        return fd_check(loss_fn, [("x", x)], rng=np.random.default_rng(seed + 1))

    @register("channel-ops")
    def _channels():
        rng = np.random.default_rng(seed)
        a = _leaf(rng, (2, 2, 3, 2, 2))
        b = _leaf(rng, (2, 3, 3, 2, 2))
        att = Tensor(1.0 + 0.2 * rng.standard_normal(5), requires_grad=True)
        r1 = _projection(rng, (2, 3, 2, 2))
        r2 = _projection(rng, (2, 5, 3, 2, 2))

        def loss_fn():
            cat = ad.concat_channels([a, b])
            gated = ad.scale_channels(cat, att)
            one = ad.tensor_sum(ad.mul(ad.select_channel(gated, 2), r1))
            two = ad.tensor_sum(ad.mul(ad.channel_softmax(gated), r2))
            return ad.add(one, two)

        return fd_check(loss_fn, [("a", a), ("b", b), ("att", att)],
                        rng=np.random.default_rng(seed + 1))

    def conv_suite(name, x_shape, w_shape, stride, groups):
        def run():
            rng = np.random.default_rng(seed)
            x = _leaf(rng, x_shape, scale=0.7)
            w = _leaf(rng, w_shape, scale=0.4)
            bias = _leaf(rng, (w_shape[0],), scale=0.2)
            out_sp = tuple(d // stride for d in x_shape[2:])
            r = _projection(rng, (x_shape[0], w_shape[0]) + out_sp)
            loss_fn = lambda: ad.tensor_sum(ad.mul(
                ad.conv3d(x, w, bias, stride=stride, groups=groups), r))
            return fd_check(loss_fn, [("x", x), ("w", w), ("b", bias)],
                            rng=np.random.default_rng(seed + 1))
        register(name)(run)

    conv_suite("conv3d-k3", (1, 4, 6, 6, 4), (3, 4, 3, 3, 3), 1, 1)
    conv_suite("conv3d-k3-groups", (1, 4, 4, 4, 4), (6, 2, 3, 3, 3), 1, 2)
    conv_suite("conv3d-k3-s2", (1, 3, 4, 4, 4), (4, 3, 3, 3, 3), 2, 1)
    conv_suite("conv3d-k2-s2", (1, 3, 4, 4, 4), (4, 3, 2, 2, 2), 2, 1)
    conv_suite("conv3d-k1", (1, 3, 4, 4, 4), (5, 3, 1, 1, 1), 1, 1)

    @register("transposed-conv3d")
    def _tconv():
        rng = np.random.default_rng(seed)
        x = _leaf(rng, (1, 3, 3, 3, 2), scale=0.7)
        w = _leaf(rng, (3, 4, 2, 2, 2), scale=0.4)
        bias = _leaf(rng, (4,), scale=0.2)
        r = _projection(rng, (1, 4, 6, 6, 4))
        loss_fn = lambda: ad.tensor_sum(ad.mul(
            ad.transposed_conv3d(x, w, bias), r))
        return fd_check(loss_fn, [("x", x), ("w", w), ("b", bias)],
                        rng=np.random.default_rng(seed + 1))

    @register("batchnorm-train")
    def _bn_train():
        rng = np.random.default_rng(seed)
        x = _leaf(rng, (2, 3, 4, 4, 2), offset=0.3)
        gamma = Tensor(1.0 + 0.2 * rng.standard_normal(3), requires_grad=True)
        beta = Tensor(0.1 * rng.standard_normal(3), requires_grad=True)
        rm = np.zeros(3)
        rv = np.ones(3)
        r = _projection(rng, x.shape)
        loss_fn = lambda: ad.tensor_sum(ad.mul(
            ad.batch_norm3d(x, gamma, beta, rm, rv, training=True), r))
        return fd_check(loss_fn, [("x", x), ("gamma", gamma), ("beta", beta)],
                        rng=np.random.default_rng(seed + 1))

    @register("batchnorm-eval")
    def _bn_eval():
        rng = np.random.default_rng(seed)
        x = _leaf(rng, (2, 3, 4, 4, 2))
        gamma = Tensor(1.0 + 0.2 * rng.standard_normal(3), requires_grad=True)
        beta = Tensor(0.1 * rng.standard_normal(3), requires_grad=True)
        rm = 0.2 * rng.standard_normal(3)
        rv = 0.5 + np.abs(rng.standard_normal(3))
        r = _projection(rng, x.shape)
        loss_fn = lambda: ad.tensor_sum(ad.mul(
            ad.batch_norm3d(x, gamma, beta, rm, rv, training=False), r))
        return fd_check(loss_fn, [("x", x), ("gamma", gamma), ("beta", beta)],
                        rng=np.random.default_rng(seed + 1))

    @register("skip-attention-block")
    def _skip_block():
        from .layers import SkipAttentionBlock

        rng = np.random.default_rng(seed)
        block = SkipAttentionBlock(2, 4, groups=2, rng=rng, dtype=np.float64)
        x = _leaf(rng, (1, 2, 4, 4, 4), offset=0.4, scale=0.5)
        r = _projection(rng, (1, 4, 4, 4, 4))
        loss_fn = lambda: ad.tensor_sum(ad.mul(block(x), r))
        named = [("x", x)] + list(block.named_parameters())
        return fd_check(loss_fn, named, n_coords=3, reject_nonsmooth=True,
                        rng=np.random.default_rng(seed + 1))

    @register("v-transition")
    def _v_transition():
        from .layers import VTransition

        rng = np.random.default_rng(seed)
        block = VTransition(3, 2, groups=1, rng=rng, dtype=np.float64)
        x = _leaf(rng, (1, 3, 4, 4, 4), offset=0.4, scale=0.5)
        r = _projection(rng, (1, 2, 4, 4, 4))
        loss_fn = lambda: ad.tensor_sum(ad.mul(block(x), r))
        named = [("x", x)] + list(block.named_parameters())
        return fd_check(loss_fn, named, n_coords=3, reject_nonsmooth=True,
                        rng=np.random.default_rng(seed + 1))

    return suites
