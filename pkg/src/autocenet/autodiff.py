"""Reverse-mode autodiff over dense numpy arrays.

Tensors carry [batch, channel, x, y, z] activations (z fastest in memory).
Every op records its parents and a vector-Jacobian closure; backward() walks
the recorded graph once in reverse topological order. Arrays keep whatever
float dtype they were created with, so the same code paths run in float32
for training and float64 for finite-difference checks.
"""

import numpy as np

from .errors import ConfigurationError, DimensionError, UsageError


class Tensor:
    """Dense nd-array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={'set' if self.grad is not None else 'none'})"

    # arithmetic sugar; scalars and ndarrays are treated as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tensor_sum(self)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)


def parameter(data):
    """Leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data, parents, vjp, op):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = (_unbroadcast(-g * a.data / (b.data * b.data), b.shape)
              if b.requires_grad else None)
        return ga, gb

    return _make(a.data / b.data, (a, b), vjp, "div")


def relu(a):
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, a.dtype.type(0)), (a,), vjp, "relu")


def log(a):
    def vjp(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), vjp, "log")


def clamp(a, lo, hi):
    mask = (a.data >= lo) & (a.data <= hi)

    def vjp(g):
        return (g * mask,)

    return _make(np.clip(a.data, lo, hi), (a,), vjp, "clamp")


def tensor_sum(a):
    def vjp(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _make(a.data.sum(), (a,), vjp, "sum")


def elementwise_mul(a, b):
    """Strict-shape elementwise product (no broadcasting)."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise DimensionError(f"elementwise_mul shape mismatch: {a.shape} vs {b.shape}")
    return mul(a, b)


def elementwise_sub(a, b):
    """Strict-shape elementwise difference (no broadcasting)."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise DimensionError(f"elementwise_sub shape mismatch: {a.shape} vs {b.shape}")
    return sub(a, b)


# ---------------------------------------------------------------------------
# channel ops for 5-D activations


def concat_channels(tensors):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(
                f"concat_channels: incompatible shapes {ref} vs {t.shape}")
    widths = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(
            g[:, bounds[i]:bounds[i + 1]] if t.requires_grad else None
            for i, t in enumerate(tensors))

    data = np.concatenate([t.data for t in tensors], axis=1)
    return _make(data, tensors, vjp, "concat")


def select_channel(a, c):
    """Pick one channel of a [B, C, ...] tensor, dropping the channel axis."""
    if not 0 <= c < a.shape[1]:
        raise DimensionError(f"channel {c} out of range for shape {a.shape}")

    def vjp(g):
        gx = np.zeros(a.shape, dtype=a.dtype)
        gx[:, c] = g
        return (gx,)

    return _make(a.data[:, c], (a,), vjp, "select_channel")


def scale_channels(a, attention):
    """Multiply every voxel of channel c by attention[c]."""
    att = attention if isinstance(attention, Tensor) else Tensor(attention)
    if att.data.ndim != 1 or att.shape[0] != a.shape[1]:
        raise DimensionError(
            f"attention shape {att.shape} does not match channels {a.shape[1]}")
    att_b = att.data.reshape((1, -1) + (1,) * (len(a.shape) - 2))
    reduce_axes = (0,) + tuple(range(2, len(a.shape)))

    def vjp(g):
        ga = g * att_b if a.requires_grad else None
        gatt = (g * a.data).sum(axis=reduce_axes) if att.requires_grad else None
        return ga, gatt

    return _make(a.data * att_b, (a, att), vjp, "scale_channels")


def channel_softmax(a):
    """Per-voxel softmax over the channel axis, max-shifted for stability."""
    if a.shape[1] < 2:
        raise DimensionError("channel_softmax needs at least 2 channels")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), vjp, "channel_softmax")


# ---------------------------------------------------------------------------
# 3-D convolution family


def _conv_padding(kernel, stride):
    if kernel not in (1, 2, 3):
        raise ConfigurationError(f"unsupported kernel size {kernel}")
    if stride not in (1, 2):
        raise ConfigurationError(f"unsupported stride {stride}")
    if stride == 1 and kernel % 2 == 0:
        raise ConfigurationError(
            f"kernel {kernel} cannot preserve dims at stride 1")
    return (kernel - 1) // 2


def _im2col(xp, kernel, stride, out_sp):
    b, c = xp.shape[:2]
    xo, yo, zo = out_sp
    if kernel == 1 and stride == 1:
        return xp.reshape(b, c, xo * yo * zo)
    cols = np.empty((b, c, kernel ** 3, xo, yo, zo), dtype=xp.dtype)
    idx = 0
    for di in range(kernel):
        for dj in range(kernel):
            for dk in range(kernel):
                cols[:, :, idx] = xp[:, :,
                                     di:di + stride * xo:stride,
                                     dj:dj + stride * yo:stride,
                                     dk:dk + stride * zo:stride]
                idx += 1
    return cols.reshape(b, c * kernel ** 3, xo * yo * zo)


def _col2im(dcols, x_shape, kernel, stride, pad, out_sp):
    b, c, x, y, z = x_shape
    xo, yo, zo = out_sp
    if kernel == 1 and stride == 1:
        return dcols.reshape(x_shape)
    gxp = np.zeros((b, c, x + 2 * pad, y + 2 * pad, z + 2 * pad),
                   dtype=dcols.dtype)
    dcols = dcols.reshape(b, c, kernel ** 3, xo, yo, zo)
    idx = 0
    for di in range(kernel):
        for dj in range(kernel):
            for dk in range(kernel):
                gxp[:, :,
                    di:di + stride * xo:stride,
                    dj:dj + stride * yo:stride,
                    dk:dk + stride * zo:stride] += dcols[:, :, idx]
                idx += 1
    if pad:
        gxp = gxp[:, :, pad:-pad, pad:-pad, pad:-pad]
    return gxp


def conv3d(x, weight, bias=None, stride=1, groups=1):
    """Grouped 3-D convolution; stride 1 preserves dims, stride 2 halves them."""
    if x.data.ndim != 5:
        raise DimensionError(f"conv3d expects 5-D input, got {x.shape}")
    if weight.data.ndim != 5:
        raise DimensionError(f"conv3d expects 5-D weight, got {weight.shape}")
    b, cin, xs, ys, zs = x.shape
    cout, cin_g, k, k2, k3 = weight.shape
    if not (k == k2 == k3):
        raise DimensionError(f"non-cubic kernel {weight.shape}")
    if cin % groups or cout % groups:
        raise ConfigurationError(
            f"channels ({cin}->{cout}) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise DimensionError(
            f"weight expects {cin_g * groups} input channels, input has {cin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
    pad = _conv_padding(k, stride)
    if stride == 2 and any(d % 2 for d in (xs, ys, zs)):
        raise DimensionError(
            f"stride-2 conv needs even spatial dims, got {(xs, ys, zs)}")

    out_sp = (xs // stride, ys // stride, zs // stride)
    xp = np.pad(x.data, ((0, 0), (0, 0)) + ((pad, pad),) * 3) if pad else x.data
    cols = _im2col(xp, k, stride, out_sp)
    ck = cin_g * k ** 3
    cols_g = cols.reshape(b, groups, ck, -1)
    wg = weight.data.reshape(groups, cout // groups, ck)
    out = np.matmul(wg[None], cols_g).reshape(b, cout, *out_sp)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        go = g.reshape(b, groups, cout // groups, -1)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(go, cols_g.transpose(0, 1, 3, 2)).sum(axis=0)
            gw = gw.reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wg.transpose(0, 2, 1)[None], go)
            gx = _col2im(dcols.reshape(b, cin * k ** 3, -1),
                         x.shape, k, stride, pad, out_sp)
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, parents, vjp, "conv3d")


def transposed_conv3d(x, weight, bias=None, stride=2):
    """2x learned upsampling; forward equals conv3d's input gradient.

    Weight layout is [in_channels, out_channels, 2, 2, 2]; only the
    kernel-2 / stride-2 configuration is supported.
    """
    if x.data.ndim != 5:
        raise DimensionError(f"transposed_conv3d expects 5-D input, got {x.shape}")
    cin, cout, k, k2, k3 = weight.shape
    if not (k == k2 == k3 == 2) or stride != 2:
        raise ConfigurationError(
            "transposed_conv3d supports only kernel 2 with stride 2")
    if cin != x.shape[1]:
        raise DimensionError(
            f"weight expects {cin} input channels, input has {x.shape[1]}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
    b, _, xs, ys, zs = x.shape
    x2 = x.data.reshape(b, cin, -1)
    out = np.empty((b, cout, 2 * xs, 2 * ys, 2 * zs), dtype=x.dtype)
    for di in range(2):
        for dj in range(2):
            for dk in range(2):
                wk = weight.data[:, :, di, dj, dk]
                out[:, :, di::2, dj::2, dk::2] = np.matmul(
                    wk.T[None], x2).reshape(b, cout, xs, ys, zs)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype) if x.requires_grad else None
        gw = np.zeros(weight.shape, dtype=g.dtype) if weight.requires_grad else None
        for di in range(2):
            for dj in range(2):
                for dk in range(2):
                    gk = g[:, :, di::2, dj::2, dk::2].reshape(b, cout, -1)
                    if gx is not None:
                        wk = weight.data[:, :, di, dj, dk]
                        gx += np.matmul(wk[None], gk).reshape(x.shape)
                    if gw is not None:
                        gw[:, :, di, dj, dk] = np.matmul(
                            x2, gk.transpose(0, 2, 1)).sum(axis=0)
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, parents, vjp, "transposed_conv3d")


def batch_norm3d(x, gamma, beta, running_mean, running_var, training,
                 momentum=0.1, eps=1e-5):
    """Per-channel batch norm over (B, X, Y, Z).

    running_mean / running_var are plain numpy buffers updated in place
    during training (unbiased variance, like the usual framework convention).
    """
    if x.data.ndim != 5:
        raise DimensionError(f"batch_norm3d expects 5-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"affine shapes {gamma.shape}/{beta.shape} do not match C={c}")
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // c
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * (n / max(n - 1, 1)))
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def vjp(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data.reshape(bshape)
            if training:
                n = x.data.size // c
                sum_gh = gh.sum(axis=axes, keepdims=True)
                sum_gh_xhat = (gh * xhat).sum(axis=axes, keepdims=True)
                gx = (inv.reshape(bshape) / n) * (
                    n * gh - sum_gh - xhat * sum_gh_xhat)
            else:
                gx = gh * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), vjp, "batch_norm3d")


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root):
    """Recorded operations in execution order (parents before consumers)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into t.grad for every requires_grad tensor.

    Adjoints are kept per-pass, so running backward twice over the same
    graph doubles the accumulated grads exactly.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any requires_grad tensor")

    tape = _topo_order(loss)
    adjoint = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape):
        g = adjoint.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
        if t._vjp is None:
            continue
        for p, pg in zip(t._parents, t._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in adjoint:
                adjoint[key] = adjoint[key] + pg
            else:
                adjoint[key] = pg
