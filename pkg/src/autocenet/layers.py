"""Network building blocks: primitive layers and the two composite blocks.

Modules discover their parameters and submodules by scanning attributes,
so construction order fixes the parameter naming used in checkpoints.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter
from .errors import ConfigurationError, DimensionError


def xavier_uniform(shape, rng, dtype):
    """Uniform init over [-limit, limit] with limit sqrt(6 / (fan_in + fan_out)).

    Fans follow axis position: shape[1] feeds fan_in, shape[0] feeds fan_out,
    both scaled by the receptive field size.
    """
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Base class with attribute-scan parameter discovery."""

    def __init__(self):
        self._training = True
        self._buffer_names = []

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name, value):
        setattr(self, name, value)
        self._buffer_names.append(name)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode=True):
        for m in self.modules():
            m._training = mode
        return self

    def eval(self):
        return self.train(False)

    @property
    def training(self):
        return self._training

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigurationError(
                f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, arr in own.items():
            value = np.asarray(state[name])
            if value.shape != arr.shape:
                raise DimensionError(
                    f"{name}: stored shape {value.shape} != expected {arr.shape}")
            arr[...] = value


class Conv3d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, groups=1,
                 rng=None, dtype=np.float32):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ConfigurationError(
                f"channels ({in_channels}->{out_channels}) not divisible "
                f"by groups={groups}")
        rng = rng or np.random.default_rng()
        self.stride = stride
        self.groups = groups
        shape = (out_channels, in_channels // groups, kernel, kernel, kernel)
        self.weight = parameter(xavier_uniform(shape, rng, dtype))
        self.bias = parameter(np.zeros(out_channels, dtype=dtype))

    def forward(self, x):
        return ad.conv3d(x, self.weight, self.bias,
                         stride=self.stride, groups=self.groups)


class ConvTranspose3d(Module):
    """Kernel-2 stride-2 learned upsampler."""

    def __init__(self, in_channels, out_channels, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        shape = (in_channels, out_channels, 2, 2, 2)
        self.weight = parameter(xavier_uniform(shape, rng, dtype))
        self.bias = parameter(np.zeros(out_channels, dtype=dtype))

    def forward(self, x):
        return ad.transposed_conv3d(x, self.weight, self.bias)


class BatchNorm3d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = parameter(np.ones(channels, dtype=dtype))
        self.beta = parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        return ad.batch_norm3d(x, self.gamma, self.beta,
                               self.running_mean, self.running_var,
                               self._training, self.momentum, self.eps)


class ChannelAttention(Module):
    """Trainable per-channel gate, initialized to pass features through."""

    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.vector = parameter(np.ones(channels, dtype=dtype))

    def forward(self, x):
        return ad.scale_channels(x, self.vector)


class SeparableConv3d(Module):
    """Grouped 3x3x3 spatial conv followed by a pointwise channel mix.

    Falls back to a single group when the channel count does not divide.
    """

    def __init__(self, in_channels, out_channels, groups=4,
                 rng=None, dtype=np.float32):
        super().__init__()
        g = groups if in_channels % groups == 0 else 1
        self.spatial = Conv3d(in_channels, in_channels, 3, groups=g,
                              rng=rng, dtype=dtype)
        self.pointwise = Conv3d(in_channels, out_channels, 1,
                                rng=rng, dtype=dtype)

    def forward(self, x):
        return self.pointwise(self.spatial(x))


class ConvUnit(Module):
    """Separable conv, batch norm, relu."""

    def __init__(self, in_channels, out_channels, groups=4,
                 rng=None, dtype=np.float32):
        super().__init__()
        self.conv = SeparableConv3d(in_channels, out_channels, groups,
                                    rng=rng, dtype=dtype)
        self.norm = BatchNorm3d(out_channels, dtype=dtype)

    def forward(self, x):
        return ad.relu(self.norm(self.conv(x)))


class SkipAttentionBlock(Module):
    """Full-resolution feature extractor with dense skips.

    Three conv units run in sequence; the input and every stage output are
    concatenated, mixed back down by a pointwise conv, and optionally gated
    by a per-channel attention vector.
    """

    def __init__(self, in_channels, out_channels, groups=4,
                 use_attention=True, rng=None, dtype=np.float32):
        super().__init__()
        self.unit1 = ConvUnit(in_channels, out_channels, groups, rng, dtype)
        self.unit2 = ConvUnit(out_channels, out_channels, groups, rng, dtype)
        self.unit3 = ConvUnit(out_channels, out_channels, groups, rng, dtype)
        self.reduce = Conv3d(in_channels + 3 * out_channels, out_channels, 1,
                             rng=rng, dtype=dtype)
        self.attention = ChannelAttention(out_channels, dtype) if use_attention else None

    def forward(self, x):
        s1 = self.unit1(x)
        s2 = self.unit2(s1)
        s3 = self.unit3(s2)
        y = self.reduce(ad.concat_channels([x, s1, s2, s3]))
        if self.attention is not None:
            y = self.attention(y)
        return y


class VTransition(Module):
    """Down-process-up block that returns to the input resolution.

    A stride-2 conv halves each spatial dim, two conv units process at the
    lower resolution, their outputs are fused by a pointwise conv (optionally
    attention-gated), a transposed conv restores resolution, and a final
    pointwise conv mixes the upsampled features with the block input. The
    output is a raw linear map, so it can serve directly as logits.
    """

    def __init__(self, in_channels, out_channels, lower_channels=None,
                 groups=4, use_attention=True, rng=None, dtype=np.float32):
        super().__init__()
        lower = lower_channels or in_channels
        self.down = Conv3d(in_channels, lower, 2, stride=2, rng=rng, dtype=dtype)
        self.down_norm = BatchNorm3d(lower, dtype=dtype)
        self.unit1 = ConvUnit(lower, lower, groups, rng, dtype)
        self.unit2 = ConvUnit(lower, lower, groups, rng, dtype)
        self.reduce_low = Conv3d(3 * lower, lower, 1, rng=rng, dtype=dtype)
        self.attention = ChannelAttention(lower, dtype) if use_attention else None
        self.up = ConvTranspose3d(lower, lower, rng=rng, dtype=dtype)
        self.up_norm = BatchNorm3d(lower, dtype=dtype)
        self.reduce_out = Conv3d(in_channels + lower, out_channels, 1,
                                 rng=rng, dtype=dtype)

    def forward(self, x):
        d = ad.relu(self.down_norm(self.down(x)))
        s1 = self.unit1(d)
        s2 = self.unit2(s1)
        low = self.reduce_low(ad.concat_channels([d, s1, s2]))
        if self.attention is not None:
            low = self.attention(low)
        u = ad.relu(self.up_norm(self.up(low)))
        return self.reduce_out(ad.concat_channels([x, u]))
