"""Channel (squeeze-excitation) and spatial (CBAM-style) gates."""
from __future__ import annotations

import numpy as np

from .layers import Conv2d, Module
from .tensor import ShapeError, Tensor, channel_stats, global_avg_pool, relu, sigmoid

SE_REDUCTION = 4
SA_KERNEL = 7
SE_HIDDEN_BIAS = 0.5


class SEBlock(Module):
    """Gate with ``c_out`` channels computed from a ``c_in``-channel feature.

    The bottleneck fully connected layers are stored as 1x1 convs acting on the
    pooled (n, c, 1, 1) descriptor.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, reduction: int = SE_REDUCTION):
        if reduction < 1:
            raise ValueError("reduction must be positive")
        self.c_in, self.c_out = c_in, c_out
        self.c_mid = max(1, c_in // reduction)
        self.fc1 = Conv2d(c_in, self.c_mid, 1, rng)
        # positive bias keeps the narrow bottleneck from starting dead under relu
        self.fc1.bias.data[...] = SE_HIDDEN_BIAS
        self.fc2 = Conv2d(self.c_mid, c_out, 1, rng)

    def __call__(self, f_high: Tensor) -> Tensor:
        if f_high.shape[1] != self.c_in:
            raise ShapeError(f"SE expects {self.c_in} channels, got {f_high.shape[1]}")
        return sigmoid(self.fc2(relu(self.fc1(global_avg_pool(f_high)))))


class SpatialAttnBlock(Module):
    def __init__(self, rng: np.random.Generator, k: int = SA_KERNEL):
        if k % 2 == 0:
            raise ValueError("spatial attention kernel must be odd")
        self.k = k
        self.conv = Conv2d(2, 1, k, rng, padding=(k - 1) // 2)

    def __call__(self, f_low: Tensor) -> Tensor:
        return sigmoid(self.conv(channel_stats(f_low)))


def se_attention(block: SEBlock, f_high: Tensor) -> Tensor:
    return block(f_high)


def spatial_attention(block: SpatialAttnBlock, f_low: Tensor) -> Tensor:
    return block(f_low)


def saturate_gate(block: SEBlock | SpatialAttnBlock) -> None:
    """Force a gate to output exactly 1.0 (used for identity reductions)."""
    last = block.fc2 if isinstance(block, SEBlock) else block.conv
    last.weight.data[...] = 0.0
    last.bias.data[...] = 1e3
