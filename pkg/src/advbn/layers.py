"""Batch normalization with running statistics, and the dual-branch variant.

A :class:`DualBNLayer` keeps two complete BN layers (own gamma/beta and own
running statistics). Clean features go through ``main``; AdvBN-perturbed
features go through ``aux``.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, batch_norm_train, channel_affine, get_default_dtype


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class Branch(str, enum.Enum):
    MAIN = "main"
    AUX = "aux"


@dataclass(frozen=True)
class FeatureStats:
    """Per-channel batch mean and standard deviation (``sqrt(var + eps)``)."""

    mean: np.ndarray
    std: np.ndarray

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


def batch_stats(f, eps: float = 1e-5) -> FeatureStats:
    """Mean and std of ``f`` over (N, H, W), population variance."""
    x = f.data if isinstance(f, Tensor) else np.asarray(f)
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW features, got shape {x.shape}")
    n, _, h, w = x.shape
    if n * h * w < 2:
        raise ValueError(f"need at least 2 values per channel, got N*H*W={n * h * w}")
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    return FeatureStats(mean=mean, std=np.sqrt(var + eps))


@dataclass
class BNLayer:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BNLayer":
        if eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        dt = get_default_dtype()
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dt)),
            beta=Tensor(np.zeros(channels, dtype=dt)),
            running_mean=np.zeros(channels, dtype=dt),
            running_var=np.ones(channels, dtype=dt),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def bn_forward(layer: BNLayer, f, mode: Mode | str = Mode.TRAIN, update_stats: bool = True) -> Tensor:
    """Apply ``gamma * (f - mu) / sigma + beta``.

    Train mode normalizes with batch statistics and, unless ``update_stats``
    is false, folds them into the running estimates with an exponential
    moving average. Eval mode uses the running estimates.
    """
    mode = Mode(mode)
    c = f.shape[1] if f.ndim >= 2 else -1
    if c != layer.channels:
        raise ShapeError(f"BN layer has {layer.channels} channels, features have shape {f.shape}")
    if mode is Mode.TRAIN:
        out, mean, var = batch_norm_train(f, layer.gamma, layer.beta, layer.eps)
        if update_stats:
            m = layer.momentum
            layer.running_mean = ((1 - m) * layer.running_mean + m * mean).astype(
                layer.running_mean.dtype
            )
            layer.running_var = ((1 - m) * layer.running_var + m * var).astype(
                layer.running_var.dtype
            )
        return out
    inv = 1.0 / np.sqrt(layer.running_var + layer.eps)
    # gamma * (f - rm) * inv + beta == (gamma * inv) * f + (beta - gamma * inv * rm)
    scale = layer.gamma * Tensor._wrap(inv.astype(layer.gamma.dtype))
    shift = layer.beta - scale * Tensor._wrap(layer.running_mean)
    return channel_affine(f, scale, shift)


@dataclass
class DualBNLayer:
    main: BNLayer
    aux: BNLayer
    active_branch: Branch = field(default=Branch.MAIN)

    @classmethod
    def from_bn(cls, bn: BNLayer) -> "DualBNLayer":
        """Promote a trained BN layer; aux starts as an independent deep copy."""
        return cls(main=bn, aux=copy.deepcopy(bn))

    @property
    def active(self) -> BNLayer:
        return self.main if Branch(self.active_branch) is Branch.MAIN else self.aux

    @property
    def channels(self) -> int:
        return self.main.channels


def dual_bn_forward(
    layer: DualBNLayer, f, mode: Mode | str = Mode.TRAIN, update_stats: bool = True
) -> Tensor:
    """Route to the active branch; only that branch's running stats move."""
    return bn_forward(layer.active, f, mode, update_stats)


def norm_forward(layer, f, mode: Mode | str = Mode.TRAIN, update_stats: bool = True) -> Tensor:
    if isinstance(layer, DualBNLayer):
        return dual_bn_forward(layer, f, mode, update_stats)
    return bn_forward(layer, f, mode, update_stats)
