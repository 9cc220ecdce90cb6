"""Readout networks, centre prior, weighted fusion, and training losses.

Each fused representation G_j passes through a readout of three stacked
reduction-attention blocks (output channels 32, 16, 1) whose final relu
leaves a nonnegative rough map. A learnable centre prior is a 2-D
Gaussian with fixed centre and trainable per-axis log-variances. The
fusion stage concatenates the rough maps (plus the prior) as channels,
runs the same three-block stack, smooths with a fixed 7x7 Gaussian, and
normalizes each image to unit mass. Training minimizes the sum of the
per-branch KL divergences (plus a squared-parameter penalty per branch)
and the KL divergence of the fused map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gazemap.autodiff import (
    ParamStore,
    Tensor,
    add,
    add_scalar,
    concat_channels,
    constant,
    conv2d,
    exp,
    gaussian_kernel2d,
    log,
    mul,
    mul_scalar,
    parameter,
    reciprocal,
    relu,
    repeat_batch,
    scale_channels,
    scale_scalar,
    square,
    sum_all,
    sum_per_image,
)
from gazemap.attention import RABlock
from gazemap.layers import ConvLayer

__all__ = ["AttentionMap", "normalize_map", "Readout", "CentreBias", "FusionHead",
           "kl_divergence", "kl_loss", "total_loss", "READOUT_CHANNELS"]

READOUT_CHANNELS = (32, 16, 1)


@dataclass
class AttentionMap:
    """Nonnegative single-channel map; ``normalized`` means unit mass per image."""

    values: Tensor
    normalized: bool = False

    def __post_init__(self) -> None:
        if self.values.dims[1] != 1:
            raise ValueError(f"attention map must be single-channel, got {self.values.dims}")

    def check(self, atol: float = 1e-9) -> None:
        v = self.values.values
        if v.min() < 0:
            raise ValueError(f"attention map has negative values (min {v.min():.3g})")
        if self.normalized:
            sums = v.sum(axis=(1, 2, 3))
            if np.abs(sums - 1.0).max() > atol:
                raise ValueError(f"normalized map mass deviates from 1: {sums}")

    def array(self) -> np.ndarray:
        """First image as a plain (H, W) array."""
        return self.values.values[0, 0]


_DEAD_MASS = 1e-12


def normalize_map(x: Tensor) -> AttentionMap:
    """Divide each image by its total mass, with a uniform fallback.

    Images whose mass is numerically dead (below 1e-12, including exact
    zeros from a dead relu) become uniform; dividing by such sums would
    overflow and their gradients are meaningless anyway.
    """
    sums = x.values.sum(axis=(1, 2, 3), keepdims=True)
    if np.all(sums > _DEAD_MASS):
        return AttentionMap(scale_channels(x, reciprocal(sum_per_image(x))), normalized=True)
    # Mixed batches: route live images through the graph, replace dead ones.
    b, c, h, w = x.dims
    dead = sums <= _DEAD_MASS
    live = ~dead
    masked = mul(x, constant(np.broadcast_to(live.astype(np.float64), x.dims).copy()))
    safe = sum_per_image(add(masked, constant(
        np.where(dead, 1.0, 0.0) * np.ones(x.dims) / (c * h * w))))
    filled = scale_channels(masked, reciprocal(safe))
    uniform = np.where(dead, 1.0, 0.0) * np.full(x.dims, 1.0 / (c * h * w))
    return AttentionMap(add(filled, constant(uniform)), normalized=True)


class Readout:
    """Three stacked reduction-attention blocks producing one rough map."""

    def __init__(self, params: ParamStore, name: str, in_channels: int,
                 rng: np.random.Generator, *, attention: bool = True,
                 stage_channels: tuple[int, ...] = READOUT_CHANNELS):
        self.stages = []
        cin = in_channels
        for n, cout in enumerate(stage_channels, start=1):
            # The last stage starts with positive bias so the initial map
            # is alive rather than stuck at the relu kink.
            bias_init = 1.0 if n == len(stage_channels) else 0.0
            self.stages.append(RABlock(params, f"{name}.stage{n}", cin, cout, rng,
                                       attention=attention, allow_expand=True,
                                       bias_init=bias_init))
            cin = cout

    def __call__(self, g: Tensor) -> Tensor:
        for stage in self.stages:
            g = stage(g)
        return g


class CentreBias:
    """Learnable centred 2-D Gaussian prior over an S x S grid.

    The mean is pinned to the grid centre ((S-1)/2 in pixel coordinates);
    only the log-variances of the two axes are trainable, so the density
    1/(2 pi sx sy) exp(-(dx^2/(2 sx^2) + dy^2/(2 sy^2))) stays positive
    and differentiable for any parameter value.
    """

    def __init__(self, params: ParamStore, name: str, size: int, *,
                 init_sigma: float | None = None):
        if size < 2:
            raise ValueError(f"prior grid needs size >= 2, got {size}")
        self.size = size
        sigma0 = init_sigma if init_sigma is not None else size / 4.0
        log_var0 = 2.0 * math.log(sigma0)
        self.log_var_x = params.add(name + ".log_var_x",
                                    parameter(np.full((1, 1, 1, 1), log_var0)))
        self.log_var_y = params.add(name + ".log_var_y",
                                    parameter(np.full((1, 1, 1, 1), log_var0)))
        centre = (size - 1) / 2.0
        coords = np.arange(size, dtype=np.float64)
        dx2 = (coords[None, :] - centre) ** 2
        dy2 = (coords[:, None] - centre) ** 2
        self._dx2 = constant(np.broadcast_to(dx2, (size, size)).reshape(1, 1, size, size).copy())
        self._dy2 = constant(np.broadcast_to(dy2, (size, size)).reshape(1, 1, size, size).copy())

    def map(self) -> Tensor:
        """Prior density for one image, dims (1, 1, S, S)."""
        inv_vx = exp(mul_scalar(self.log_var_x, -1.0))
        inv_vy = exp(mul_scalar(self.log_var_y, -1.0))
        expo = mul_scalar(add(scale_scalar(self._dx2, inv_vx),
                              scale_scalar(self._dy2, inv_vy)), -0.5)
        # 1/(2 pi sx sy) = exp(-(log vx + log vy)/2) / (2 pi)
        amp = exp(mul_scalar(add(self.log_var_x, self.log_var_y), -0.5))
        return scale_scalar(exp(expo), mul_scalar(amp, 1.0 / (2.0 * math.pi)))

    def __call__(self, batch: int) -> Tensor:
        m = self.map()
        return repeat_batch(m, batch) if batch > 1 else m


class FusionHead:
    """Fuse rough maps (and the prior) into the final normalized map.

    ``mode="network"`` (default) stacks three reduction-attention blocks
    over the maps concatenated as channels. ``mode="sum"`` instead adds
    the maps, applies a single learnable 1x1 weight layer and a relu.
    Both finish with a fixed 7x7 Gaussian smoothing and per-image
    normalization.
    """

    def __init__(self, params: ParamStore, name: str, in_maps: int,
                 rng: np.random.Generator, *, attention: bool = True,
                 mode: str = "network", blur_size: int = 7, blur_sigma: float = 1.5):
        if mode not in ("network", "sum"):
            raise ValueError(f"fusion mode must be 'network' or 'sum', got {mode!r}")
        self.in_maps = in_maps
        self.mode = mode
        self.blur_kernel = gaussian_kernel2d(blur_sigma, size=blur_size)
        if mode == "network":
            self.stack = Readout(params, name, in_maps, rng, attention=attention)
        else:
            self.mix = ConvLayer(params, name + ".mix", 1, 1, 1, rng, std=1e-6, bias_init=0.0)
            self.mix.weight.values[:] = 1.0

    def __call__(self, maps: list[Tensor]) -> AttentionMap:
        if len(maps) != self.in_maps:
            raise ValueError(f"fusion head expects {self.in_maps} maps, got {len(maps)}")
        if self.mode == "network":
            fused = self.stack(concat_channels(maps))
        else:
            total = maps[0]
            for m in maps[1:]:
                total = add(total, m)
            fused = relu(self.mix(total))
        smooth = conv2d(fused, self.blur_kernel, padding="same")
        return normalize_map(smooth)


def kl_divergence(m: Tensor, z: Tensor, eps: float = 1e-8) -> Tensor:
    """Batch-mean of sum_t z_t * log(z_t / (m_t + eps) + eps) as a scalar tensor."""
    if m.dims != z.dims:
        raise ValueError(f"kl: dims mismatch {m.dims} vs {z.dims}")
    ratio = mul(z, reciprocal(add_scalar(m, eps)))
    per_image = sum_per_image(mul(z, log(add_scalar(ratio, eps))))
    return mul_scalar(sum_all(per_image), 1.0 / m.dims[0])


def kl_loss(m: AttentionMap, z: AttentionMap, eps: float = 1e-8) -> Tensor:
    """KL divergence between two normalized attention maps."""
    if not (m.normalized and z.normalized):
        raise ValueError("kl_loss requires both maps normalized to unit mass")
    if m.values.values.min() < 0 or z.values.values.min() < 0:
        raise ValueError("kl_loss: maps must be nonnegative")
    return kl_divergence(m.values, z.values, eps)


def total_loss(rough: list[AttentionMap], final: AttentionMap, target: AttentionMap,
               alpha: float, branch_params: list[list[Tensor]],
               eps: float = 1e-8) -> Tensor:
    """Sum of per-branch (KL + alpha * squared-parameter penalty) plus fused KL."""
    if len(branch_params) != len(rough):
        raise ValueError(
            f"need one parameter group per rough map: {len(rough)} maps, "
            f"{len(branch_params)} groups")
    loss = kl_loss(final, target, eps)
    for m, group in zip(rough, branch_params):
        loss = add(loss, kl_loss(m, target, eps))
        if alpha != 0.0 and group:
            penalty = None
            for p in group:
                term = sum_all(square(p))
                penalty = term if penalty is None else add(penalty, term)
            loss = add(loss, mul_scalar(penalty, alpha))
    return loss
