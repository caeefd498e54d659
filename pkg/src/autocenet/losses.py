"""Objective functions: soft dice, prior deep supervision, contour losses.

Probability inputs are Tensors so gradients flow; ground-truth masks and
the contour weight map are plain arrays treated as constants.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DimensionError
from .layers import Conv3d, ConvTranspose3d

DICE_EPS = 1e-6
PROB_EPS = 1e-7


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    w0: float = 1.0
    w1: float = 10.0

    def validate(self):
        vals = (self.alpha, self.beta, self.gamma, self.w0, self.w1)
        if any(v < 0 for v in vals):
            raise ConfigurationError(f"loss weights must be non-negative: {vals}")
        return self


def _target_array(target):
    if hasattr(target, "data") and not isinstance(target, ad.Tensor):
        target = target.data
    return np.asarray(target)


def _align_target(target, shape):
    """Match a target mask to [B, X, Y, Z] probs, allowing 3-D for B=1."""
    arr = _target_array(target)
    if arr.ndim == 3 and len(shape) == 4 and shape[0] == 1:
        arr = arr[None]
    if arr.shape != shape:
        raise DimensionError(
            f"target shape {arr.shape} does not match probs {shape}")
    return arr


def max_pool_label(label):
    """2x downscaled mask by max pooling, so thin foreground survives."""
    arr = _target_array(label)
    if any(d % 2 for d in arr.shape[-3:]):
        raise DimensionError(f"label dims {arr.shape} must be even to pool")
    x, y, z = arr.shape[-3:]
    lead = arr.shape[:-3]
    pooled = arr.reshape(lead + (x // 2, 2, y // 2, 2, z // 2, 2))
    axes = tuple(range(len(lead) + 1, len(lead) + 7, 2))
    return pooled.max(axis=axes)


def soft_dice_loss(probs, target):
    """1 - 2*sum(p*t) / (sum(p^2) + sum(t^2) + eps)."""
    t = _align_target(target, probs.shape).astype(probs.dtype)
    num = ad.elementwise_mul(probs, t).sum()
    den = ad.elementwise_mul(probs, probs).sum() + float((t * t).sum()) + DICE_EPS
    return 1.0 - 2.0 * num / den


def liver_prior_loss(prior_residual_logits, y_dl):
    """Soft dice of the residual prior prediction against the pooled mask."""
    if prior_residual_logits.shape[1] != 2:
        raise DimensionError(
            f"prior logits need 2 channels, got {prior_residual_logits.shape}")
    probs = ad.select_channel(ad.channel_softmax(prior_residual_logits), 1)
    return soft_dice_loss(probs, y_dl)


def final_loss(final_logits, y_l):
    """Soft dice of the fused prediction against the full-resolution mask."""
    if final_logits.shape[1] != 2:
        raise DimensionError(
            f"final logits need 2 channels, got {final_logits.shape}")
    probs = ad.select_channel(ad.channel_softmax(final_logits), 1)
    return soft_dice_loss(probs, y_l)


def contour_weight_map(gt_contour, final_fg_probs):
    """Per-voxel contour attention: the ground-truth contour scaled down
    wherever the current segmentation is already confident.

    Computed from detached probability data; no gradient flows through it.
    """
    probs = final_fg_probs.data if isinstance(final_fg_probs, ad.Tensor) \
        else np.asarray(final_fg_probs)
    gamma_c = _align_target(gt_contour, probs.shape).astype(probs.dtype)
    return ad.Tensor(gamma_c * (1.0 - probs))


def _clamped_logs(contour_probs):
    p = ad.clamp(contour_probs, PROB_EPS, 1.0 - PROB_EPS)
    return ad.log(p), ad.log(1.0 - p)


def penalized_contour_loss(contour_probs, gt_contour, weight_map, w0=1.0, w1=10.0):
    """Weighted cross-entropy whose foreground term is gated per voxel by
    the attention weight map; mean over all voxels."""
    gamma_c = _align_target(gt_contour, contour_probs.shape).astype(contour_probs.dtype)
    wmap = weight_map.data if isinstance(weight_map, ad.Tensor) else np.asarray(weight_map)
    if wmap.shape != contour_probs.shape:
        raise DimensionError(
            f"weight map shape {wmap.shape} does not match probs "
            f"{contour_probs.shape}")
    log_p, log_1mp = _clamped_logs(contour_probs)
    bg = ad.elementwise_mul(log_1mp, w0 * (1.0 - gamma_c))
    fg = ad.elementwise_mul(log_p, w1 * gamma_c * wmap)
    n = contour_probs.data.size
    return -(bg.sum() + fg.sum()) / n


def full_contour_loss(contour_probs, gt_contour, w0=1.0, w1=10.0):
    """Weighted cross-entropy against the full contour (no penalization)."""
    gamma_c = _align_target(gt_contour, contour_probs.shape).astype(contour_probs.dtype)
    log_p, log_1mp = _clamped_logs(contour_probs)
    bg = ad.elementwise_mul(log_1mp, w0 * (1.0 - gamma_c))
    fg = ad.elementwise_mul(log_p, w1 * gamma_c)
    n = contour_probs.data.size
    return -(bg.sum() + fg.sum()) / n


def manual_selfsup_contour_loss(contour_probs, gt_contour, final_fg_probs,
                                threshold=0.5):
    """Cross-entropy against a contour erased wherever the segmentation
    already exceeds the threshold (hard, unweighted variant)."""
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"threshold must be in (0, 1), got {threshold}")
    gamma_c = _align_target(gt_contour, contour_probs.shape).astype(contour_probs.dtype)
    fg = final_fg_probs.data if isinstance(final_fg_probs, ad.Tensor) \
        else np.asarray(final_fg_probs)
    if fg.shape != contour_probs.shape:
        raise DimensionError(
            f"segmentation probs shape {fg.shape} does not match contour "
            f"probs {contour_probs.shape}")
    erased = gamma_c * (fg <= threshold)
    log_p, log_1mp = _clamped_logs(contour_probs)
    bg = ad.elementwise_mul(log_1mp, 1.0 - erased)
    keep = ad.elementwise_mul(log_p, erased)
    n = contour_probs.data.size
    return -(bg.sum() + keep.sum()) / n


def decay_parameters(net):
    """Convolution kernels only; biases, norms, and gates are never decayed."""
    for m in net.modules():
        if isinstance(m, (Conv3d, ConvTranspose3d)):
            yield m.weight


def total_loss(l_final, l_prior, l_contour, weights, parameters=()):
    """Weighted sum of the components plus squared-norm weight decay."""
    total = l_final
    if l_prior is not None and weights.alpha != 0.0:
        total = total + weights.alpha * l_prior
    if l_contour is not None and weights.beta != 0.0:
        total = total + weights.beta * l_contour
    if weights.gamma != 0.0:
        for w in parameters:
            total = total + weights.gamma * ad.elementwise_mul(w, w).sum()
    return total
