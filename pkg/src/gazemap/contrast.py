"""Centre-surround contrast features from raw low-level activations.

The input feature is averaged across channels into an intensity map,
smoothed at five increasing Gaussian scales into a pyramid, and each
input channel's squared deviation from each pyramid level forms a
5*C-channel squared-residual stack. Two learnable 1x1 convolutions merge
the residual stack and the pyramid into the output contrast feature, so
the weighted summation over scales and channels is learned rather than
fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gazemap.autodiff import (
    ParamStore,
    Tensor,
    add,
    concat_channels,
    gaussian_blur,
    mean_channels,
    slice_channels,
    square,
    sub,
)
from gazemap.layers import ConvLayer

__all__ = ["DEFAULT_SIGMAS", "ContrastConfig", "intensity_map", "gaussian_pyramid",
           "ContrastBlock"]

# Smoothing scales in pixels for a 224-pixel base; scaled linearly otherwise.
DEFAULT_SIGMAS = (5.0, 10.0, 20.0, 40.0, 80.0)


@dataclass(frozen=True)
class ContrastConfig:
    sigmas: tuple[float, ...]
    out_channels: int

    def __post_init__(self) -> None:
        if len(self.sigmas) != 5:
            raise ValueError(f"expected 5 pyramid scales, got {len(self.sigmas)}")
        if any(b <= a for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ValueError(f"sigmas must be strictly increasing: {self.sigmas}")
        if any(s <= 0 for s in self.sigmas):
            raise ValueError(f"sigmas must be positive: {self.sigmas}")
        if self.out_channels < 1:
            raise ValueError(f"out_channels must be >= 1, got {self.out_channels}")

    @staticmethod
    def for_base(base_size: int, out_channels: int) -> "ContrastConfig":
        scale = base_size / 224.0
        return ContrastConfig(tuple(s * scale for s in DEFAULT_SIGMAS), out_channels)

    @property
    def levels(self) -> int:
        return len(self.sigmas)


def intensity_map(o: Tensor) -> Tensor:
    """Squeeze (B, C, H, W) to a single channel by averaging over channels."""
    return mean_channels(o)


def gaussian_pyramid(intensity: Tensor, cfg: ContrastConfig) -> Tensor:
    """Stack of the intensity map smoothed at each configured scale."""
    if intensity.dims[1] != 1:
        raise ValueError(f"pyramid input must be single-channel, got {intensity.dims}")
    return concat_channels([gaussian_blur(intensity, s) for s in cfg.sigmas])


class ContrastBlock:
    """Learnable merge of squared residuals and pyramid into contrast features."""

    def __init__(self, params: ParamStore, name: str, in_channels: int, cfg: ContrastConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.in_channels = in_channels
        # Merge weights carry no bias; the residual stack is already signed-free.
        self.merge_residual = ConvLayer(params, name + ".merge_residual",
                                        cfg.levels * in_channels, cfg.out_channels, 1, rng,
                                        bias=False)
        self.merge_pyramid = ConvLayer(params, name + ".merge_pyramid",
                                       cfg.levels, cfg.out_channels, 1, rng, bias=False)

    def squared_residuals(self, o: Tensor, pyramid: Tensor) -> Tensor:
        """(o_c - pyramid_l)^2 stacked channel-major: c outer, level inner."""
        parts = []
        for c in range(o.dims[1]):
            oc = slice_channels(o, c, c + 1)
            for l in range(pyramid.dims[1]):
                parts.append(square(sub(oc, slice_channels(pyramid, l, l + 1))))
        return concat_channels(parts)

    def __call__(self, o: Tensor) -> Tensor:
        if o.dims[1] != self.in_channels:
            raise ValueError(
                f"contrast block expects {self.in_channels} channels, got {o.dims[1]}")
        pyramid = gaussian_pyramid(intensity_map(o), self.cfg)
        residuals = self.squared_residuals(o, pyramid)
        return add(self.merge_residual(residuals), self.merge_pyramid(pyramid))
