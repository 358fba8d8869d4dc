"""Interchangeable stride-2 downsampling blocks.

Three variants are compared:

* ``strided_conv``: a single 3x3 convolution with stride 2.
* ``binomial``: a frozen 5x5 binomial low-pass filter applied per channel at
  full resolution, followed by the 3x3 stride-2 convolution.
* ``avg_pool``: 3x3 average pooling with stride 2, then a 3x3 stride-1
  convolution.
"""
from __future__ import annotations

import enum
from math import comb

import numpy as np

from .tensor import DEFAULT_DTYPE, AvgPool2d, Conv2d, FixedDepthwise, Layer, seeded_rng


class DownsampleStrategy(enum.Enum):
    STRIDED_CONV = "strided_conv"
    BINOMIAL = "binomial"
    AVG_POOL = "avg_pool"

    @classmethod
    def parse(cls, token: str) -> "DownsampleStrategy":
        try:
            return cls(token)
        except ValueError:
            choices = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown downsampling strategy {token!r} (choose from {choices})") from None


STRATEGY_TOKENS = tuple(s.value for s in DownsampleStrategy)


def binomial_row(n: int) -> np.ndarray:
    """Normalized Pascal row of order ``n - 1``."""
    row = np.array([comb(n - 1, i) for i in range(n)], dtype=np.float64)
    return row / row.sum()


def binomial_kernel(n: int) -> np.ndarray:
    if n < 1 or n % 2 == 0:
        raise ValueError(f"binomial kernel size must be odd and >= 1, got {n}")
    v = binomial_row(n)
    return np.outer(v, v)


class DownsampleBlock(Layer):
    """One halving stage; ``strategy`` picks the anti-aliasing variant."""

    def __init__(self, strategy, cin, cout, rng=None, mode="zero", dtype=DEFAULT_DTYPE,
                 blur_size=5):
        if isinstance(strategy, str):
            strategy = DownsampleStrategy.parse(strategy)
        self.strategy = strategy
        rng = rng if rng is not None else seeded_rng(0)
        self.pre = None
        if strategy is DownsampleStrategy.STRIDED_CONV:
            self.conv = Conv2d(cin, cout, 3, stride=2, padding=1, mode=mode, rng=rng, dtype=dtype)
        elif strategy is DownsampleStrategy.BINOMIAL:
            self.pre = FixedDepthwise(binomial_kernel(blur_size), stride=1,
                                      padding=blur_size // 2, mode=mode)
            self.conv = Conv2d(cin, cout, 3, stride=2, padding=1, mode=mode, rng=rng, dtype=dtype)
        else:
            self.pre = AvgPool2d(3, stride=2, padding=1, mode=mode)
            self.conv = Conv2d(cin, cout, 3, stride=1, padding=1, mode=mode, rng=rng, dtype=dtype)

    @property
    def blur_kernel(self):
        if self.strategy is DownsampleStrategy.BINOMIAL:
            return self.pre.kernel
        return None

    def params(self):
        return [(f"conv.{name}", p) for name, p in self.conv.params()]

    def forward(self, x):
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ValueError(f"downsampling needs even spatial size, got {h}x{w}")
        if self.pre is not None:
            x = self.pre.forward(x)
        return self.conv.forward(x)

    def backward(self, upstream):
        g = self.conv.backward(upstream)
        if self.pre is not None:
            g = self.pre.backward(g)
        return g
