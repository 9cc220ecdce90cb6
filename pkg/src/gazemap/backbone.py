"""Five-block convolutional feature extractor with multi-level outputs.

The layout follows VGG16's convolutional part (13 conv layers arranged
2-2-3-3-3) with three modifications so that deep features stay at an
eighth of the input resolution: the pool after the fourth block has
stride 1, the fifth block uses dilation 2 to keep its receptive field,
and the final pool is dropped entirely. Forward yields the outputs of
the last conv in each block: full, 1/2, 1/4, 1/8 and 1/8 resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gazemap.autodiff import ParamStore, Tensor, max_pool2d, relu
from gazemap.layers import ConvLayer

__all__ = ["BackboneConfig", "BackboneOutputs", "Backbone", "CANONICAL_WIDTHS",
           "ALLOWED_BASE_SIZES"]

CANONICAL_WIDTHS = (64, 128, 256, 512, 512)
BLOCK_DEPTHS = (2, 2, 3, 3, 3)
ALLOWED_BASE_SIZES = (64, 112, 224)


@dataclass(frozen=True)
class BackboneConfig:
    base_size: int = 224
    width_factor: float = 1.0
    in_channels: int = 3

    def __post_init__(self) -> None:
        if self.base_size not in ALLOWED_BASE_SIZES:
            raise ValueError(
                f"base_size must be one of {ALLOWED_BASE_SIZES}, got {self.base_size}")
        if self.base_size % 8 != 0:
            raise ValueError(f"base_size must be divisible by 8, got {self.base_size}")
        if not 0.0 < self.width_factor <= 1.0:
            raise ValueError(f"width_factor must be in (0, 1], got {self.width_factor}")
        if min(self.widths()) < 1:
            raise ValueError(f"scaled channel widths must be >= 1: {self.widths()}")

    def widths(self) -> tuple[int, ...]:
        return tuple(max(1, round(w * self.width_factor)) for w in CANONICAL_WIDTHS)


@dataclass
class BackboneOutputs:
    """Per-block features: f1_raw at S, f2_raw at S/2, f3 at S/4, f4 and f5 at S/8.

    Blocks beyond a shallow backbone's depth are None.
    """

    f1_raw: Tensor
    f2_raw: Tensor | None = None
    f3: Tensor | None = None
    f4: Tensor | None = None
    f5: Tensor | None = None

    def as_tuple(self) -> tuple[Tensor, ...]:
        return (self.f1_raw, self.f2_raw, self.f3, self.f4, self.f5)


class Backbone:
    """Feature extractor; ``max_block`` < 5 builds only the shallow blocks."""

    def __init__(self, cfg: BackboneConfig, params: ParamStore, rng: np.random.Generator,
                 name: str = "backbone", max_block: int = 5):
        if not 1 <= max_block <= 5:
            raise ValueError(f"max_block must be in 1..5, got {max_block}")
        self.cfg = cfg
        self.name = name
        self.max_block = max_block
        self.layers: list[list[ConvLayer]] = []
        cin = cfg.in_channels
        for block, (depth, width) in enumerate(zip(BLOCK_DEPTHS, cfg.widths()), start=1):
            if block > max_block:
                break
            dilation = 2 if block == 5 else 1
            convs = []
            for i in range(1, depth + 1):
                convs.append(ConvLayer(params, f"{name}.conv{block}_{i}", cin, width, 3, rng,
                                       dilation=dilation))
                cin = width
            self.layers.append(convs)

    def forward(self, image: Tensor) -> BackboneOutputs:
        s = self.cfg.base_size
        if image.dims[1] != self.cfg.in_channels or image.dims[2:] != (s, s):
            raise ValueError(
                f"backbone expects input (B,{self.cfg.in_channels},{s},{s}), got {image.dims}")

        def run_block(x: Tensor, block: int) -> Tensor:
            for conv in self.layers[block - 1]:
                x = relu(conv(x))
            return x

        feats: list[Tensor | None] = [None] * 5
        x = run_block(image, 1)
        feats[0] = x
        if self.max_block >= 2:
            x = run_block(max_pool2d(x, 2, 2), 2)
            feats[1] = x
        if self.max_block >= 3:
            x = run_block(max_pool2d(x, 2, 2), 3)
            feats[2] = x
        if self.max_block >= 4:
            x = run_block(max_pool2d(x, 2, 2), 4)
            feats[3] = x
        if self.max_block >= 5:
            # Stride-1 pool keeps the fourth-scale resolution for block 5.
            feats[4] = run_block(max_pool2d(x, 2, 1, padding="same"), 5)
        return BackboneOutputs(*feats)

    def param_names(self) -> list[str]:
        names = []
        for block, depth in enumerate(BLOCK_DEPTHS[:self.max_block], start=1):
            for i in range(1, depth + 1):
                names.append(f"{self.name}.conv{block}_{i}.weight")
                names.append(f"{self.name}.conv{block}_{i}.bias")
        return names

    def import_pretrained(self, params: ParamStore, path) -> list[str]:
        """Overwrite backbone tensors from a checkpoint file, matched by name.

        Only valid at width_factor 1 (the file carries canonical widths).
        Entries absent from the file (typically all of block 5) are left
        untouched; names that do not exist in the backbone, or shape
        mismatches, are rejected with the offending names listed.
        Returns the names that were imported.
        """
        from gazemap import dataio

        if self.cfg.width_factor != 1.0:
            raise ValueError(
                f"pretrained import requires width_factor 1, got {self.cfg.width_factor}")
        entries = dataio.read_checkpoint_entries(path)
        known = set(self.param_names())
        unknown = sorted(n for n in entries if "#" not in n and n not in known)
        if unknown:
            raise ValueError(f"{path}: entries not in backbone: {unknown[:8]}")
        bad_shape = sorted(n for n in entries if "#" not in n
                           and entries[n].shape != params[n].dims)
        if bad_shape:
            raise ValueError(f"{path}: shape mismatch for {bad_shape[:8]}")
        imported = []
        for name, arr in entries.items():
            if "#" in name:
                continue
            params[name].values[:] = arr
            imported.append(name)
        return imported
