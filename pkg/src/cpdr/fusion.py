"""Cross-level fusion blocks for post-decoder refinement.

Naming: ``f_i`` is the coarser (high-level) feature, ``f_ip1`` the adjacent
finer (low-level) one at exactly twice the resolution.
"""
from __future__ import annotations

import numpy as np

from .attention import SEBlock, SpatialAttnBlock
from .layers import Conv2d, Module
from .tensor import ShapeError, Tensor, bilinear_resize, concat_channels, eltwise


def _check_adjacent(f_i: Tensor, f_ip1: Tensor) -> None:
    if f_i.shape[0] != f_ip1.shape[0]:
        raise ShapeError("batch sizes differ")
    if (f_ip1.shape[2], f_ip1.shape[3]) != (2 * f_i.shape[2], 2 * f_i.shape[3]):
        raise ShapeError(f"levels are not adjacent: {f_i.shape[2:]} vs {f_ip1.shape[2:]}")


class ADFBlock(Module):
    """Channel gate from the coarse level applied to the fine level, then a strided conv back down."""

    def __init__(self, c_i: int, c_ip1: int, c_down: int, rng: np.random.Generator):
        self.se = SEBlock(c_i, c_ip1, rng)
        self.post_conv = Conv2d(c_ip1, c_ip1, 3, rng)
        self.down_conv = Conv2d(c_ip1, c_down, 3, rng, stride=2, padding=1)
        self.out_channels = (c_i + c_down, c_ip1)

    def __call__(self, f_i: Tensor, f_ip1: Tensor) -> tuple[Tensor, Tensor]:
        _check_adjacent(f_i, f_ip1)
        out_ip1 = self.post_conv(eltwise(f_ip1, self.se(f_i), "mul"))
        out_i = concat_channels([f_i, self.down_conv(out_ip1)])
        return out_i, out_ip1


class AUFBlock(Module):
    """Spatial gate from the fine level applied to the coarse level, then upsampled back."""

    def __init__(self, c_i: int, c_ip1: int, c_up: int, rng: np.random.Generator):
        self.sa = SpatialAttnBlock(rng)
        self.post_conv = Conv2d(c_i, c_i, 3, rng)
        self.up_conv = Conv2d(c_i, c_up, 3, rng)
        self.out_channels = (c_i, c_ip1 + c_up)

    def __call__(self, f_i: Tensor, f_ip1: Tensor) -> tuple[Tensor, Tensor]:
        _check_adjacent(f_i, f_ip1)
        h, w = f_i.shape[2:]
        gate = bilinear_resize(self.sa(f_ip1), h, w)
        out_i = self.post_conv(eltwise(f_i, gate, "mul"))
        up = bilinear_resize(out_i, f_ip1.shape[2], f_ip1.shape[3])
        out_ip1 = concat_channels([f_ip1, self.up_conv(up)])
        return out_i, out_ip1


class DACFBlock(Module):
    """Both gates in one block; aggregation uses 1x1 convs and a residual on the gated fine feature."""

    def __init__(self, c_i: int, c_ip1: int, rng: np.random.Generator, c_down: int | None = None):
        c_down = c_ip1 if c_down is None else c_down
        self.se = SEBlock(c_i, c_ip1, rng)
        self.sa = SpatialAttnBlock(rng)
        self.down_conv = Conv2d(c_ip1, c_down, 3, rng, stride=2, padding=1)
        self.mix_conv1 = Conv2d(c_down + c_i, c_ip1, 1, rng)
        self.mix_conv2 = Conv2d(c_ip1, c_ip1, 1, rng)
        self.out_channels = c_ip1

    def __call__(self, f_i: Tensor, f_ip1: Tensor) -> Tensor:
        _check_adjacent(f_i, f_ip1)
        w_ip1 = eltwise(f_ip1, self.se(f_i), "mul")
        w_i = eltwise(f_i, bilinear_resize(self.sa(f_ip1), f_i.shape[2], f_i.shape[3]), "mul")
        c_i = concat_channels([self.down_conv(w_ip1), w_i])
        mixed = self.mix_conv1(bilinear_resize(c_i, f_ip1.shape[2], f_ip1.shape[3]))
        if mixed.shape != w_ip1.shape:
            raise ShapeError(f"residual add mismatch {mixed.shape} vs {w_ip1.shape}")
        return self.mix_conv2(eltwise(mixed, w_ip1, "add"))


def adf_forward(block: ADFBlock, f_i: Tensor, f_ip1: Tensor) -> tuple[Tensor, Tensor]:
    return block(f_i, f_ip1)


def auf_forward(block: AUFBlock, f_i: Tensor, f_ip1: Tensor) -> tuple[Tensor, Tensor]:
    return block(f_i, f_ip1)


def dacf_forward(block: DACFBlock, f_i: Tensor, f_ip1: Tensor) -> Tensor:
    return block(f_i, f_ip1)
