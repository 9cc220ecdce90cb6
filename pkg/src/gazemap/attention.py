"""Reduction-attention: 1x1 channel reduction with learned channel weights.

The block first maps the input to a narrower feature with a 1x1
convolution followed by relu. The reduced feature is squeezed to a
per-channel descriptor by global average pooling, one fully connected
layer plus a sigmoid turns the descriptor into weights in (0, 1), and
each reduced channel is rescaled by its weight. With ``attention=False``
the block degrades to the plain reduction (1x1 conv + relu), which is
what the ablation variants without channel recalibration use.
"""

from __future__ import annotations

import math

import numpy as np

from gazemap.autodiff import (
    ParamStore,
    Tensor,
    conv2d,
    fused_reduction_attention,
    global_avg_pool,
    parameter,
    relu,
    scale_channels,
    sigmoid,
)
from gazemap.layers import ConvLayer, truncated_normal

__all__ = ["RABlock"]


class RABlock:
    """Channel reduction plus optional sigmoid channel gating.

    ``out_channels`` may exceed ``in_channels`` only when
    ``allow_expand`` is set (the readout stages and the fusion entry
    reductions need that freedom at narrow widths).
    """

    def __init__(self, params: ParamStore, name: str, in_channels: int, out_channels: int,
                 rng: np.random.Generator, *, attention: bool = True,
                 allow_expand: bool = False, bias_init: float = 0.0):
        if out_channels < 1:
            raise ValueError(f"out_channels must be >= 1, got {out_channels}")
        if out_channels > in_channels and not allow_expand:
            raise ValueError(
                f"{name}: reduction block cannot expand {in_channels} -> {out_channels} channels")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.attention = attention
        self.reduce = ConvLayer(params, name + ".reduce", in_channels, out_channels, 1, rng,
                                bias_init=bias_init)
        if attention:
            std = math.sqrt(1.0 / out_channels)
            self.fc_weight = params.add(
                name + ".fc.weight",
                parameter(truncated_normal(rng, (out_channels, out_channels, 1, 1), std)))
            self.fc_bias = params.add(
                name + ".fc.bias", parameter(np.zeros((1, out_channels, 1, 1))))

    def channel_weights(self, reduced: Tensor) -> Tensor:
        """Sigmoid channel weights (B, C', 1, 1) for an already reduced feature."""
        descriptor = global_avg_pool(reduced)
        return sigmoid(conv2d(descriptor, self.fc_weight, self.fc_bias))

    def __call__(self, x: Tensor) -> Tensor:
        if x.dims[1] != self.in_channels:
            raise ValueError(
                f"reduction-attention channel mismatch: input has {x.dims[1]} channels, "
                f"block expects {self.in_channels}")
        if not self.attention:
            return relu(self.reduce(x))
        return fused_reduction_attention(x, self.reduce.weight, self.reduce.bias,
                                         self.fc_weight, self.fc_bias)

    def unfused(self, x: Tensor) -> Tensor:
        """Composition from the primitive ops; must match __call__ exactly."""
        reduced = relu(self.reduce(x))
        if not self.attention:
            return reduced
        return scale_channels(reduced, self.channel_weights(reduced))
