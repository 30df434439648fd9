"""Two-branch densely connected convolutional encoder.

The main branch yields low-resolution annotations ``A`` at 1/16 of the input
extents; a dense block attached before the last transition pooling yields
high-resolution annotations ``B`` at 1/8.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .tensor import DTYPE, Parameter, ShapeError, Tensor, concat, relu

BRANCH_DEPTHS = (0, 8, 16, 24)


@dataclass(frozen=True)
class DenseBlockConfig:
    growth_rate: int = 24
    depth: int = 32
    bottleneck: bool = True

    def __post_init__(self):
        if self.growth_rate <= 0:
            raise ValueError(f"growth rate must be positive, got {self.growth_rate}")
        if self.depth < 0 or (self.bottleneck and self.depth % 2):
            raise ValueError(f"bottleneck block depth must be even and ≥ 0, got {self.depth}")

    @property
    def steps(self) -> int:
        return self.depth // 2 if self.bottleneck else self.depth

    def out_channels(self, in_channels: int) -> int:
        return in_channels + self.steps * self.growth_rate


@dataclass(frozen=True)
class EncoderConfig:
    """``branch_depth=None`` disables the high-resolution branch entirely."""

    initial_channels: int = 48
    growth_rate: int = 24
    block_depth: int = 32
    compression: float = 0.5
    branch_depth: Optional[int] = 16

    def __post_init__(self):
        if not 0.0 < self.compression <= 1.0:
            raise ValueError(f"compression must lie in (0, 1], got {self.compression}")
        if self.branch_depth is not None and (self.branch_depth < 0 or self.branch_depth % 2):
            raise ValueError(f"branch depth must be even and ≥ 0, got {self.branch_depth}")

    @property
    def main_blocks(self) -> tuple[DenseBlockConfig, ...]:
        return (DenseBlockConfig(self.growth_rate, self.block_depth),) * 3

    @property
    def branch_block(self) -> Optional[DenseBlockConfig]:
        if self.branch_depth is None:
            return None
        return DenseBlockConfig(self.growth_rate, self.branch_depth)

    @property
    def multiscale(self) -> bool:
        return self.branch_depth is not None


@dataclass
class AnnotationGrid:
    A: Tensor
    mask_a: np.ndarray
    B: Optional[Tensor] = None
    mask_b: Optional[np.ndarray] = None


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """A cell is valid when any pixel it covers is valid."""
    n, h, w = mask.shape
    blocks = mask.reshape(n, h // factor, factor, w // factor, factor)
    return blocks.max(axis=(2, 4)).astype(DTYPE)


class ConvBN:
    """Convolution followed by batch norm, ReLU and dropout."""

    def __init__(self, params: dict, buffers: dict, name: str, cin: int, cout: int,
                 kernel: int, stride: int, rng: np.random.Generator):
        self.stride = stride
        self.padding = kernel // 2
        fan_in = cin * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        self.kernel = Parameter(rng.uniform(-bound, bound, (cout, cin, kernel, kernel)), f"{name}.conv")
        self.gamma = Parameter(np.ones(cout), f"{name}.bn.gamma")
        self.beta = Parameter(np.zeros(cout), f"{name}.bn.beta")
        self.running_mean = np.zeros(cout, dtype=DTYPE)
        self.running_var = np.ones(cout, dtype=DTYPE)
        for p in (self.kernel, self.gamma, self.beta):
            params[p.name] = p
        buffers[f"{name}.bn.mean"] = self.running_mean
        buffers[f"{name}.bn.var"] = self.running_var
        self.cout = cout

    def __call__(self, x: Tensor, training: bool, rng, rate: float) -> Tensor:
        y = nn.conv2d(x, self.kernel, self.stride, self.padding)
        y = nn.batch_norm(y, self.gamma, self.beta, self.running_mean, self.running_var, training)
        return nn.dropout(relu(y), rate, training, rng)


class DenseBlock:
    def __init__(self, params, buffers, name: str, cin: int, cfg: DenseBlockConfig, rng):
        self.cfg = cfg
        self.name = name
        self.layers = []
        c = cin
        k = cfg.growth_rate
        for i in range(cfg.steps):
            if cfg.bottleneck:
                neck = ConvBN(params, buffers, f"{name}.{i}.neck", c, 4 * k, 1, 1, rng)
                grow = ConvBN(params, buffers, f"{name}.{i}.grow", 4 * k, k, 3, 1, rng)
                self.layers.append((neck, grow))
            else:
                self.layers.append((ConvBN(params, buffers, f"{name}.{i}.grow", c, k, 3, 1, rng),))
            c += k
        self.out_channels = c

    def __call__(self, x: Tensor, training: bool, rng, rate: float, trace=None) -> Tensor:
        for step, convs in enumerate(self.layers):
            h = x
            for conv in convs:
                h = conv(h, training, rng, rate)
            x = concat([x, h], axis=1)
            if trace is not None:
                trace.append((f"{self.name}.{step}", x.shape))
        return x


class Transition:
    """1×1 compression convolution; pooling is applied separately."""

    def __init__(self, params, buffers, name: str, cin: int, compression: float, rng):
        if cin < 2:
            raise ShapeError(f"transition needs ≥ 2 input channels, got {cin}")
        self.out_channels = int(np.floor(compression * cin))
        self.conv = ConvBN(params, buffers, name, cin, self.out_channels, 1, 1, rng)

    def __call__(self, x: Tensor, training: bool, rng, rate: float) -> Tensor:
        return self.conv(x, training, rng, rate)


class DenseEncoder:
    def __init__(self, cfg: EncoderConfig, params: dict, buffers: dict, rng: np.random.Generator):
        self.cfg = cfg
        self.stem = ConvBN(params, buffers, "enc.stem", 1, cfg.initial_channels, 7, 2, rng)
        b1, b2, b3 = cfg.main_blocks
        self.block1 = DenseBlock(params, buffers, "enc.block1", cfg.initial_channels, b1, rng)
        self.trans1 = Transition(params, buffers, "enc.trans1", self.block1.out_channels, cfg.compression, rng)
        self.block2 = DenseBlock(params, buffers, "enc.block2", self.trans1.out_channels, b2, rng)
        self.trans2 = Transition(params, buffers, "enc.trans2", self.block2.out_channels, cfg.compression, rng)
        self.block3 = DenseBlock(params, buffers, "enc.block3", self.trans2.out_channels, b3, rng)
        self.branch = None
        if cfg.branch_block is not None:
            self.branch = DenseBlock(params, buffers, "enc.branch", self.trans2.out_channels,
                                     cfg.branch_block, rng)

    @property
    def channels_a(self) -> int:
        return self.block3.out_channels

    @property
    def channels_b(self) -> Optional[int]:
        return None if self.branch is None else self.branch.out_channels

    def __call__(self, images: Tensor, image_mask: np.ndarray, training: bool = False,
                 rng: Optional[np.random.Generator] = None, dropout: float = 0.0,
                 trace: Optional[list] = None) -> AnnotationGrid:
        if images.ndim != 4 or images.shape[1] != 1:
            raise ShapeError(f"encoder expects images of shape [N,1,H,W], got {images.shape}")
        h0, w0 = images.shape[2:]
        if h0 % 16 or w0 % 16:
            raise ShapeError(f"image extents {h0}x{w0} must be multiples of 16; pad the input first")

        def note(name, t):
            if trace is not None:
                trace.append((name, t.shape))
            return t

        x = note("stem", self.stem(images, training, rng, dropout))
        x = note("stem.pool", nn.max_pool2d(x, 2))
        x = note("block1", self.block1(x, training, rng, dropout, trace))
        x = note("trans1", self.trans1(x, training, rng, dropout))
        x = note("trans1.pool", nn.avg_pool2d(x, 2))
        x = note("block2", self.block2(x, training, rng, dropout, trace))
        fork = note("trans2", self.trans2(x, training, rng, dropout))
        x = note("trans2.pool", nn.avg_pool2d(fork, 2))
        a = note("block3", self.block3(x, training, rng, dropout, trace))
        mask = np.asarray(image_mask, dtype=DTYPE)
        grid = AnnotationGrid(A=a, mask_a=downsample_mask(mask, 16))
        if self.branch is not None:
            grid.B = note("branch", self.branch(fork, training, rng, dropout, trace))
            grid.mask_b = downsample_mask(mask, 8)
        return grid
