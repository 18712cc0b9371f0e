"""Double attention: parallel channel-wise and spatial-wise gating.

``f' = f * Fc + f * Fs`` where ``Fc`` is a per-channel gate computed from
global avg/max descriptors through a shared bias-free MLP and ``Fs`` is a
per-pixel gate from a 7x7 conv over channel-pooled maps. One ``DaWeights``
exists per feature scale and the centroid and boundary branches hold the
same object, so they share parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (ShapeError, Tensor, add, concat_channels, conv2d, mlp2, mul,
                     pool_channel, pool_spatial, reshape, sigmoid)


@dataclass
class DaWeights:
    mlp_w1: Tensor  # [C/r, C]
    mlp_w2: Tensor  # [C, C/r]
    conv7_w: Tensor  # [1, 2, 7, 7]
    conv7_b: Tensor  # [1]
    reduction: int = 4

    def __post_init__(self):
        if self.conv7_w.shape != (1, 2, 7, 7) or self.conv7_b.shape != (1,):
            raise ShapeError(f"DaWeights: conv7 must be 2-in/1-out 7x7, got {self.conv7_w.shape}")
        hidden, C = self.mlp_w1.shape
        if self.mlp_w2.shape != (C, hidden) or C % self.reduction or C // self.reduction != hidden:
            raise ShapeError(f"DaWeights: MLP shapes {self.mlp_w1.shape}/{self.mlp_w2.shape} "
                             f"inconsistent with reduction {self.reduction}")

    @property
    def channels(self) -> int:
        return self.mlp_w1.shape[1]

    @classmethod
    def zeros(cls, channels: int, reduction: int = 4) -> "DaWeights":
        h = channels // reduction
        return cls(Tensor(np.zeros((h, channels)), True), Tensor(np.zeros((channels, h)), True),
                   Tensor(np.zeros((1, 2, 7, 7)), True), Tensor(np.zeros(1), True), reduction)

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, reduction: int = 4, gain: float = 0.1) -> "DaWeights":
        if channels % reduction:
            raise ShapeError(f"DaWeights: reduction {reduction} does not divide C={channels}")
        h = channels // reduction
        return cls(
            Tensor(rng.normal(0, gain * np.sqrt(2.0 / channels), (h, channels)), True),
            Tensor(rng.normal(0, gain * np.sqrt(2.0 / h), (channels, h)), True),
            Tensor(rng.normal(0, gain * np.sqrt(1.0 / 98), (1, 2, 7, 7)), True),
            Tensor(np.zeros(1), True),
            reduction,
        )

    def params(self) -> dict[str, Tensor]:
        return {"mlp_w1": self.mlp_w1, "mlp_w2": self.mlp_w2, "conv7_w": self.conv7_w, "conv7_b": self.conv7_b}


def _check(f: Tensor, w: DaWeights) -> None:
    if f.ndim != 4:
        raise ShapeError(f"double attention expects NCHW features, got {f.shape}")
    if f.shape[1] != w.channels:
        raise ShapeError(f"double attention: features have C={f.shape[1]} but weights expect C={w.channels}")


def channel_attention(f: Tensor, w: DaWeights) -> Tensor:
    """sigmoid(MLP(avgpool(f)) + MLP(maxpool(f))) -> [N, C, 1, 1]."""
    _check(f, w)
    N, C = f.shape[:2]
    avg = reshape(pool_spatial(f, "avg"), (N, C))
    mx = reshape(pool_spatial(f, "max"), (N, C))
    logits = add(mlp2(avg, w.mlp_w1, w.mlp_w2, w.reduction), mlp2(mx, w.mlp_w1, w.mlp_w2, w.reduction))
    return sigmoid(reshape(logits, (N, C, 1, 1)))


def spatial_attention(f: Tensor, w: DaWeights) -> Tensor:
    """sigmoid(conv7x7([avg_c(f); max_c(f)])) -> [N, 1, H, W]."""
    _check(f, w)
    pooled = concat_channels([pool_channel(f, "avg"), pool_channel(f, "max")])
    return sigmoid(conv2d(pooled, w.conv7_w, w.conv7_b, stride=1, pad=3))


def da_forward(f: Tensor, w: DaWeights) -> Tensor:
    return add(mul(f, channel_attention(f, w)), mul(f, spatial_attention(f, w)))
