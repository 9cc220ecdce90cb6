"""Parameter initialization and the shared convolution layer wrapper."""

from __future__ import annotations

import math

import numpy as np

from gazemap.autodiff import ParamStore, Tensor, conv2d, parameter

__all__ = ["truncated_normal", "ConvLayer"]


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) samples redrawn until all lie within +-2 std."""
    v = rng.normal(0.0, std, size=shape)
    bad = np.abs(v) > 2.0 * std
    while bad.any():
        v[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(v) > 2.0 * std
    return v


class ConvLayer:
    """Conv kernel + optional bias registered in a ParamStore.

    Kernels default to fan-in scaled truncated normal
    (std = sqrt(2 / (cin * k * k))), biases to zero.
    """

    def __init__(self, params: ParamStore, name: str, cin: int, cout: int, ksize: int,
                 rng: np.random.Generator, *, std: float | None = None,
                 dilation: int = 1, bias: bool = True, bias_init: float = 0.0):
        if std is None:
            std = math.sqrt(2.0 / (cin * ksize * ksize))
        self.dilation = dilation
        self.weight = params.add(
            name + ".weight", parameter(truncated_normal(rng, (cout, cin, ksize, ksize), std)))
        self.bias = params.add(
            name + ".bias", parameter(np.full((1, cout, 1, 1), float(bias_init)))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, dilation=self.dilation, padding="same")
