"""Densely connected top-down fusion of the five multi-level features.

Every branch j builds its output G_j from its own feature F_j plus all
deeper features F_i (i > j). Each contributing term is first reduced to
a common channel width by its own reduction-attention block, then lifted
to branch-j resolution by a tandem of (nearest x2 resize + 3x3 conv) and
reduction-attention steps, one step per octave. The deepest feature
enters the sum unweighted; every other term is scaled by a learnable
scalar short-connection weight. The summed branch feature is finally
lifted to full resolution by per-branch exit stages (branch 1, already
at full size, applies one extra reduction-attention instead).

The branch count is fixed at five and the fifth feature shares the
fourth's resolution, which is why its path for branch j has J-1-j steps
instead of i-j.
"""

from __future__ import annotations

import numpy as np

from gazemap.autodiff import (
    ParamStore,
    Tensor,
    add,
    nearest_resize,
    parameter,
    scale_scalar,
)
from gazemap.attention import RABlock
from gazemap.layers import ConvLayer

__all__ = ["ResizeConv", "TandemStep", "DenseFusion", "apply_steps"]


class ResizeConv:
    """Nearest-neighbour x2 upsampling followed by a 3x3 "same" convolution."""

    def __init__(self, params: ParamStore, name: str, channels: int,
                 rng: np.random.Generator):
        self.conv = ConvLayer(params, name, channels, channels, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(nearest_resize(x, 2))


class TandemStep:
    """One resize-convolution followed by one reduction-attention."""

    def __init__(self, params: ParamStore, name: str, channels: int,
                 rng: np.random.Generator, attention: bool):
        self.resize_conv = ResizeConv(params, name + ".conv", channels, rng)
        self.ra = RABlock(params, name + ".ra", channels, channels, rng, attention=attention)

    def __call__(self, x: Tensor) -> Tensor:
        return self.ra(self.resize_conv(x))


def apply_steps(steps: list[TandemStep], x: Tensor) -> Tensor:
    """Tandem application; an empty list is the identity."""
    for step in steps:
        x = step(x)
    return x


class DenseFusion:
    """Combine features {F1..F5} into same-width, full-resolution {G1..G5}."""

    BRANCHES = 5

    def __init__(self, params: ParamStore, name: str, in_channels: tuple[int, ...],
                 fuse_channels: int, rng: np.random.Generator, *, attention: bool = True):
        if len(in_channels) != self.BRANCHES:
            raise ValueError(f"expected {self.BRANCHES} input widths, got {len(in_channels)}")
        j_max = self.BRANCHES
        self.fuse_channels = fuse_channels
        self.entry: dict[tuple[int, int], RABlock] = {}
        self.paths: dict[tuple[int, int], list[TandemStep]] = {}
        self.weights: dict[tuple[int, int], Tensor] = {}
        self.exits: dict[int, list] = {}

        for j in range(1, j_max + 1):
            for i in range(j, j_max + 1):
                prefix = f"{name}.g{j}.from{i}"
                self.entry[(j, i)] = RABlock(params, prefix + ".entry", in_channels[i - 1],
                                             fuse_channels, rng, attention=attention,
                                             allow_expand=True)
                self.paths[(j, i)] = [
                    TandemStep(params, f"{prefix}.up{n}", fuse_channels, rng, attention)
                    for n in range(1, self.term_depth(j, i) + 1)]
                if i < j_max:
                    self.weights[(j, i)] = params.add(
                        f"{name}.g{j}.w{i}", parameter(np.ones((1, 1, 1, 1))))
            if j == 1:
                self.exits[j] = [RABlock(params, f"{name}.g1.exit", fuse_channels,
                                         fuse_channels, rng, attention=attention)]
            else:
                n_exit = j - 1 if j < j_max else j_max - 2
                self.exits[j] = [
                    TandemStep(params, f"{name}.g{j}.exit{n}", fuse_channels, rng, attention)
                    for n in range(1, n_exit + 1)]

    @classmethod
    def term_depth(cls, j: int, i: int) -> int:
        """Octaves from feature i's scale up to branch j's scale."""
        if i == j == cls.BRANCHES:
            return 0  # the deepest branch upsamples in its exit stage
        if i < cls.BRANCHES:
            return i - j
        return cls.BRANCHES - 1 - j

    def term(self, features: tuple[Tensor, ...], j: int, i: int) -> Tensor:
        """Feature i reduced and lifted to branch j's scale (no scalar weight)."""
        return apply_steps(self.paths[(j, i)], self.entry[(j, i)](features[i - 1]))

    def apply_exit(self, j: int, x: Tensor) -> Tensor:
        if j == 1:
            return self.exits[1][0](x)
        return apply_steps(self.exits[j], x)

    def branch(self, features: tuple[Tensor, ...], j: int) -> Tensor:
        j_max = self.BRANCHES
        if j == j_max:
            return self.apply_exit(j, self.term(features, j, j))
        total = None
        for i in range(j, j_max + 1):
            t = self.term(features, j, i)
            if i < j_max:
                t = scale_scalar(t, self.weights[(j, i)])
            total = t if total is None else add(total, t)
        return self.apply_exit(j, total)

    def __call__(self, features) -> list[Tensor]:
        feats = tuple(features)
        if len(feats) != self.BRANCHES:
            raise ValueError(f"expected {self.BRANCHES} features, got {len(feats)}")
        return [self.branch(feats, j) for j in range(1, self.BRANCHES + 1)]
