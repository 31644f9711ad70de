"""Convolutional Block Attention Module: channel attention, then spatial attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Parameter, ShapeError, Tensor, channel_pool, concat, conv2d,
                     global_pool, mlp_forward, mul, reshape, sigmoid)


# spatial gate starts near-open (sigmoid(3) ~ 0.95): stacked gates otherwise
# shrink activations enough to stall early training
SAM_BIAS_INIT = 3.0


def hidden_width(channels: int, reduction: int) -> int:
    """Hidden MLP width; the ratio is clamped so at least one unit remains."""
    r = min(reduction, channels)
    if channels % r:
        raise ShapeError(f"reduction ratio {r} does not divide channel count {channels}")
    return channels // r


def cbam_param_count(channels: int, reduction: int = 16, kernel: int = 7) -> int:
    return 2 * channels * hidden_width(channels, reduction) + 2 * kernel * kernel + 1


@dataclass
class CbamParams:
    channels: int
    reduction: int
    kernel: int
    w1: Parameter
    w2: Parameter
    conv_w: Parameter
    conv_b: Parameter

    @classmethod
    def init(cls, channels: int, reduction: int = 16, kernel: int = 7,
             rng: np.random.Generator | None = None, name: str = "cbam") -> "CbamParams":
        if kernel < 1 or kernel % 2 == 0:
            raise ShapeError(f"spatial kernel size must be odd, got {kernel}")
        hidden = hidden_width(channels, reduction)
        rng = rng if rng is not None else np.random.default_rng(0)
        w1 = rng.normal(0.0, np.sqrt(2.0 / channels), (hidden, channels))
        w2 = rng.normal(0.0, np.sqrt(1.0 / hidden), (channels, hidden))
        cw = rng.normal(0.0, np.sqrt(1.0 / (2 * kernel * kernel)), (1, 2, kernel, kernel))
        return cls(channels, reduction, kernel,
                   Parameter(w1, f"{name}.mlp1"), Parameter(w2, f"{name}.mlp2"),
                   Parameter(cw, f"{name}.sam_w"), Parameter(np.full(1, SAM_BIAS_INIT), f"{name}.sam_b"))

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.w2, self.conv_w, self.conv_b]


@dataclass
class AttentionPair:
    channel: np.ndarray
    spatial: np.ndarray


def _check(feat: Tensor, params: CbamParams) -> None:
    c_axis = 0 if feat.data.ndim == 3 else 1
    if feat.data.ndim not in (3, 4):
        raise ShapeError(f"CBAM expects [C,H,W] or [N,C,H,W], got {feat.shape}")
    if feat.shape[c_axis] != params.channels:
        raise ShapeError(f"CBAM built for {params.channels} channels, got {feat.shape[c_axis]}")


def channel_attention(feat: Tensor, params: CbamParams) -> Tensor:
    _check(feat, params)
    avg = mlp_forward(global_pool(feat, "avg"), params.w1, params.w2)
    mx = mlp_forward(global_pool(feat, "max"), params.w1, params.w2)
    return sigmoid(avg + mx)


def spatial_attention(feat: Tensor, params: CbamParams) -> Tensor:
    _check(feat, params)
    axis = 0 if feat.data.ndim == 3 else 1
    pooled = concat([channel_pool(feat, "avg"), channel_pool(feat, "max")], axis=axis)
    return sigmoid(conv2d(pooled, params.conv_w, params.conv_b,
                          stride=1, pad=(params.kernel - 1) // 2))


def cbam_forward(feat: Tensor, params: CbamParams) -> tuple[Tensor, AttentionPair]:
    ca = channel_attention(feat, params)
    bshape = ca.shape + (1, 1)
    refined = mul(feat, reshape(ca, bshape))
    sa = spatial_attention(refined, params)
    out = mul(refined, sa)
    return out, AttentionPair(ca.data, sa.data)
