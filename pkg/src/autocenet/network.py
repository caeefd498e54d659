"""The segmentation network: shared features, three branches, fused head.

A full-resolution skip-attention block extracts shared features. A liver
prior branch works at half resolution and, in its default form, subtracts
the outputs of two parallel transitions so only the residual correction
survives. A context branch and a contour branch run at full resolution.
The fusion stage concatenates context features, the learned upsampling of
the prior residual, and (when present) contour features, refines them with
one more transition, and maps to two-class logits.
"""

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import CheckpointFormatError, ConfigurationError, DimensionError, UsageError
from .layers import (BatchNorm3d, Conv3d, ConvTranspose3d, Module,
                     SkipAttentionBlock, VTransition)

CONTOUR_MODES = ("self_supervised", "full", "manual", "off")

CHECKPOINT_MAGIC = b"ACNW"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    """Widths and wiring switches for AutoCENet and its ablations."""

    input_dims: tuple = (256, 256, 64)
    base_width: int = 96
    context_width: int = 48
    prior_width: int = 48
    prior_up_width: int = 16
    contour_width: int = 48
    fusion_width: int = 48
    sequential_width: int = 48
    groups: int = 4
    contour_mode: str = "self_supervised"
    disable_attention: bool = False
    disable_autocontext: bool = False
    disable_residual_prior: bool = False
    include_contour_in_fusion: bool = True
    manual_threshold: float = 0.5
    seed: int = 0

    def validate(self):
        if len(self.input_dims) != 3:
            raise ConfigurationError(f"input_dims must be 3-D, got {self.input_dims}")
        if any(d <= 0 or d % 4 for d in self.input_dims):
            raise ConfigurationError(
                f"input dims {self.input_dims} must be positive and divisible by 4")
        widths = (self.base_width, self.context_width, self.prior_width,
                  self.prior_up_width, self.contour_width, self.fusion_width,
                  self.sequential_width)
        if any(w <= 0 for w in widths):
            raise ConfigurationError(f"widths must be positive, got {widths}")
        if self.groups < 1:
            raise ConfigurationError(f"groups must be >= 1, got {self.groups}")
        if self.contour_mode not in CONTOUR_MODES:
            raise ConfigurationError(
                f"contour_mode {self.contour_mode!r} not in {CONTOUR_MODES}")
        if not 0.0 < self.manual_threshold < 1.0:
            raise ConfigurationError(
                f"manual_threshold must be in (0, 1), got {self.manual_threshold}")
        return self


def desk_config(**overrides):
    """Small configuration that trains in minutes on one CPU core."""
    cfg = NetworkConfig(input_dims=(32, 32, 16), base_width=16,
                        context_width=16, prior_width=16, prior_up_width=4,
                        contour_width=16, fusion_width=16)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class NetworkOutputs:
    final_logits: object
    prior_residual_logits: object
    contour_logits: object = None


ABLATIONS = ("none", "autonet", "att", "A", "R", "AR", "FC", "MC")


def apply_ablation(config, name):
    """Rewire a config for one of the named variants."""
    if name not in ABLATIONS:
        raise ConfigurationError(f"unknown ablation {name!r}, expected one of {ABLATIONS}")
    if name == "none":
        return replace(config, contour_mode="self_supervised")
    if name == "FC":
        return replace(config, contour_mode="full")
    if name == "MC":
        return replace(config, contour_mode="manual")
    base = replace(config, contour_mode="off")
    if name == "att":
        return replace(base, disable_attention=True)
    if name == "A":
        return replace(base, disable_autocontext=True)
    if name == "R":
        return replace(base, disable_residual_prior=True)
    if name == "AR":
        return replace(base, disable_autocontext=True, disable_residual_prior=True)
    return base  # "autonet": contour branch removed, everything else intact


class AutoCENet(Module):
    """See module docstring for the wiring."""

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        self.trained = False
        rng = np.random.default_rng(config.seed)
        g = config.groups
        att = not config.disable_attention

        self.skip = SkipAttentionBlock(1, config.base_width, g, att, rng)

        self.prior_stem = Conv3d(config.base_width, config.prior_width, 2,
                                 stride=2, rng=rng)
        self.prior_norm = BatchNorm3d(config.prior_width)
        if config.disable_residual_prior:
            self.prior_a = VTransition(config.prior_width, config.sequential_width,
                                       groups=g, use_attention=att, rng=rng)
            self.prior_b = VTransition(config.sequential_width, 2,
                                       groups=g, use_attention=att, rng=rng)
        else:
            self.prior_a = VTransition(config.prior_width, 2,
                                       groups=g, use_attention=att, rng=rng)
            self.prior_b = VTransition(config.prior_width, 2,
                                       groups=g, use_attention=att, rng=rng)
        self.prior_up = ConvTranspose3d(2, config.prior_up_width, rng=rng)

        self.context = VTransition(config.base_width, config.context_width,
                                   groups=g, use_attention=att, rng=rng)

        fusion_in = config.context_width + config.prior_up_width
        if config.contour_mode != "off":
            self.contour = VTransition(config.base_width, config.contour_width,
                                       groups=g, use_attention=att, rng=rng)
            self.contour_head = Conv3d(config.contour_width, 2, 1, rng=rng)
            if config.include_contour_in_fusion:
                fusion_in += config.contour_width
        else:
            self.contour = None
            self.contour_head = None

        self.fusion = VTransition(fusion_in, config.fusion_width,
                                  groups=g, use_attention=att, rng=rng)
        self.head = Conv3d(config.fusion_width, 2, 1, rng=rng)

    def forward(self, x, mode=None):
        if mode is not None:
            if mode not in ("train", "eval"):
                raise ConfigurationError(f"mode must be train or eval, got {mode!r}")
            self.train(mode == "train")
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(x)
        expect = (1,) + tuple(self.config.input_dims)
        if x.data.ndim != 5 or x.shape[1:] != expect:
            raise DimensionError(
                f"input shape {x.shape} does not match (B, {expect[0]}, "
                f"{expect[1]}, {expect[2]}, {expect[3]})")

        shared = self.skip(x)

        p = ad.relu(self.prior_norm(self.prior_stem(shared)))
        if self.config.disable_residual_prior:
            prior_logits = self.prior_b(self.prior_a(p))
        else:
            prior_logits = ad.elementwise_sub(self.prior_a(p), self.prior_b(p))
        prior_full = self.prior_up(prior_logits)

        context = self.context(shared)

        contour_logits = None
        fusion_parts = [context, prior_full]
        if self.contour is not None:
            contour_feats = self.contour(shared)
            contour_logits = self.contour_head(contour_feats)
            if self.config.include_contour_in_fusion:
                fusion_parts.append(contour_feats)

        fused = self.fusion(ad.concat_channels(fusion_parts))
        final_logits = self.head(fused)
        return NetworkOutputs(final_logits=final_logits,
                              prior_residual_logits=prior_logits,
                              contour_logits=contour_logits)

    def predict(self, volume):
        """Segment a preprocessed volume into a binary label volume."""
        from .data import LabelVolume

        if not self.trained:
            raise UsageError("predict called on an untrained network; "
                             "train it or load a checkpoint first")
        if tuple(volume.data.shape) != tuple(self.config.input_dims):
            raise DimensionError(
                f"volume dims {volume.data.shape} do not match "
                f"network input {self.config.input_dims}")
        self.eval()
        x = ad.Tensor(volume.data[None, None].astype(np.float32))
        out = self.forward(x)
        probs = ad.channel_softmax(out.final_logits).data[0]
        mask = (probs[1] > probs[0]).astype(np.uint8)  # ties go to background
        return LabelVolume(mask, volume.spacing)

    def count_parameters(self):
        return sum(p.data.size for p in self.parameters())


def build(config):
    return AutoCENet(config)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, count, then length-prefixed named blobs


def write_blobs(path, named_arrays):
    """Serialize {name: array} in the checkpoint blob format (float32)."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(named_arrays)))
        for name, arr in named_arrays.items():
            raw = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes())


def save_checkpoint(net, path):
    write_blobs(path, net.state_dict())


def read_checkpoint(path):
    """Parse a checkpoint into {name: float32 array}, validating structure."""
    with open(path, "rb") as f:
        buf = f.read()

    def need(offset, count, what):
        if offset + count > len(buf):
            raise CheckpointFormatError(f"truncated while reading {what}", offset)

    need(0, 4, "magic")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {buf[:4]!r}", 0)
    need(4, 8, "header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    pos = 12
    state = {}
    for _ in range(count):
        need(pos, 4, "name length")
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(pos, name_len, "name")
        try:
            name = buf[pos:pos + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("name is not valid UTF-8", pos)
        pos += name_len
        need(pos, 4, "ndim")
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if ndim > 8:
            raise CheckpointFormatError(f"implausible ndim {ndim}", pos - 4)
        need(pos, 4 * ndim, "shape")
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        need(pos, 4 * size, f"data of {name}")
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=pos)
        pos += 4 * size
        state[name] = data.reshape(shape).copy()
    if pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - pos} trailing bytes", pos)
    return state


def load_checkpoint(net, path):
    net.load_state_dict(read_checkpoint(path))
    net.trained = True
    return net
