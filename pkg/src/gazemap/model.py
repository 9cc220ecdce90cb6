"""Full saliency model: feature extraction, fusion, readout, prior, losses.

Seven wiring variants are selectable by name. The shallow variants
combine a subset of the features by plain upsample-and-concatenate and
produce a single rough map; the dense variants run the densely
connected fusion over all five features and produce five rough maps.

=============  =======================  ========  =====  =========
mode           features                 combiner  prior  attention
=============  =======================  ========  =====  =========
NCF            raw F1, raw F2           direct    no     no
CF             contrast F1, F2          direct    no     no
SF             F3, F4, F5               direct    no     no
DCF            contrast F1, F2, F3-F5   direct    no     no
DenCF          contrast F1, F2, F3-F5   dense     no     no
DenCF+CBP      contrast F1, F2, F3-F5   dense     yes    no
full           contrast F1, F2, F3-F5   dense     yes    yes
=============  =======================  ========  =====  =========
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gazemap.autodiff import ParamStore, Tensor, concat_channels, constant
from gazemap.backbone import Backbone, BackboneConfig
from gazemap.contrast import ContrastBlock, ContrastConfig
from gazemap.fusion import DenseFusion, ResizeConv
from gazemap.head import AttentionMap, CentreBias, FusionHead, Readout, normalize_map, total_loss

__all__ = ["MODES", "ModelConfig", "ModelOutput", "SaliencyModel"]

MODES = ("NCF", "CF", "SF", "DCF", "DenCF", "DenCF+CBP", "full")

# source key -> (backbone block, octaves below full resolution)
_SOURCE_INFO = {
    "raw1": (1, 0), "c1": (1, 0),
    "raw2": (2, 1), "c2": (2, 1),
    "f3": (3, 2), "f4": (4, 3), "f5": (5, 3),
}

_MODE_TABLE: dict[str, tuple[tuple[str, ...], str, bool, bool]] = {
    "NCF": (("raw1", "raw2"), "direct", False, False),
    "CF": (("c1", "c2"), "direct", False, False),
    "SF": (("f3", "f4", "f5"), "direct", False, False),
    "DCF": (("c1", "c2", "f3", "f4", "f5"), "direct", False, False),
    "DenCF": (("c1", "c2", "f3", "f4", "f5"), "dense", False, False),
    "DenCF+CBP": (("c1", "c2", "f3", "f4", "f5"), "dense", True, False),
    "full": (("c1", "c2", "f3", "f4", "f5"), "dense", True, True),
}


@dataclass(frozen=True)
class ModelConfig:
    base_size: int = 224
    width_factor: float = 1.0
    fuse_channels: int = 0  # 0 selects max(8, round(256 * width_factor))
    mode: str = "full"
    fusion: str = "network"  # "sum" selects the literal summed-map fusion
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fusion not in ("network", "sum"):
            raise ValueError(f"fusion must be 'network' or 'sum', got {self.fusion!r}")

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(base_size=self.base_size, width_factor=self.width_factor)

    def resolved_fuse_channels(self) -> int:
        if self.fuse_channels > 0:
            return self.fuse_channels
        return max(8, round(256 * self.width_factor))


@dataclass
class ModelOutput:
    rough: list[AttentionMap]
    final: AttentionMap
    prior: Tensor | None = None
    fused: list[Tensor] = field(default_factory=list)
    sources: dict[str, Tensor] = field(default_factory=dict)


class SaliencyModel:
    """Builds exactly the parameters its mode uses and runs the forward graph."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        sources, combiner, use_prior, attention = _MODE_TABLE[cfg.mode]
        self.sources = sources
        self.combiner = combiner
        self.use_prior = use_prior
        self.attention = attention

        self.params = ParamStore()
        rng = np.random.default_rng(cfg.seed)
        bb_cfg = cfg.backbone_config()
        widths = bb_cfg.widths()
        max_block = max(_SOURCE_INFO[s][0] for s in sources)
        self.backbone = Backbone(bb_cfg, self.params, rng, max_block=max_block)

        self.contrast: dict[str, ContrastBlock] = {}
        for key, idx in (("c1", 0), ("c2", 1)):
            if key in sources:
                ccfg = ContrastConfig.for_base(cfg.base_size, widths[idx])
                self.contrast[key] = ContrastBlock(self.params, f"contrast{idx + 1}",
                                                   widths[idx], ccfg, rng)

        src_channels = {s: widths[_SOURCE_INFO[s][0] - 1] for s in sources}
        fuse = cfg.resolved_fuse_channels()
        self.fuse_channels = fuse

        if combiner == "dense":
            in_channels = tuple(src_channels[s] for s in sources)
            self.fusion = DenseFusion(self.params, "fusion", in_channels, fuse, rng,
                                      attention=attention)
            self.readouts = [Readout(self.params, f"readout{j}", fuse, rng,
                                     attention=attention)
                             for j in range(1, 6)]
            self.direct_up = None
        else:
            self.fusion = None
            self.direct_up = {}
            for s in sources:
                octaves = _SOURCE_INFO[s][1]
                self.direct_up[s] = [
                    ResizeConv(self.params, f"direct.{s}.up{n}", src_channels[s], rng)
                    for n in range(1, octaves + 1)]
            cat_channels = sum(src_channels[s] for s in sources)
            self.readouts = [Readout(self.params, "readout1", cat_channels, rng,
                                     attention=attention)]

        self.centre_bias = CentreBias(self.params, "prior", cfg.base_size) \
            if use_prior else None
        n_maps = len(self.readouts) + (1 if use_prior else 0)
        self.head = FusionHead(self.params, "head", n_maps, rng, attention=attention,
                               mode=cfg.fusion)

    # ------------------------------------------------------------------
    def forward(self, images) -> ModelOutput:
        x = images if isinstance(images, Tensor) else constant(np.asarray(images))
        feats = self.backbone.forward(x)
        raw = {"raw1": feats.f1_raw, "raw2": feats.f2_raw, "f3": feats.f3,
               "f4": feats.f4, "f5": feats.f5}
        src: dict[str, Tensor] = {}
        for s in self.sources:
            if s in ("c1", "c2"):
                src[s] = self.contrast[s](raw["raw" + s[1]])
            else:
                src[s] = raw[s]

        fused: list[Tensor] = []
        if self.combiner == "dense":
            fused = self.fusion([src[s] for s in self.sources])
            rough_raw = [ro(g) for ro, g in zip(self.readouts, fused)]
        else:
            lifted = []
            for s in self.sources:
                t = src[s]
                for step in self.direct_up[s]:
                    t = step(t)
                lifted.append(t)
            rough_raw = [self.readouts[0](concat_channels(lifted))]

        rough = [normalize_map(r) for r in rough_raw]
        prior = self.centre_bias(x.dims[0]) if self.centre_bias is not None else None
        head_in = [r.values for r in rough] + ([prior] if prior is not None else [])
        final = self.head(head_in)
        return ModelOutput(rough=rough, final=final, prior=prior, fused=fused, sources=src)

    def predict(self, images) -> np.ndarray:
        """Final maps as a plain (B, H, W) array."""
        return self.forward(images).final.values.values[:, 0]

    # ------------------------------------------------------------------
    def branch_param_groups(self) -> list[list[Tensor]]:
        """Per rough map, the parameters penalized with that branch's loss.

        Parameters shared between branches (the feature extractor) are
        assigned to the lowest branch that uses them so each tensor is
        penalized exactly once; counting the backbone into all five
        branch cones quintuples its decay pressure and demonstrably
        destabilizes desk-scale training.
        """
        groups = []
        if self.combiner == "dense":
            claimed: set[int] = set()
            for j in range(1, 6):
                prefixes = ["backbone.", f"fusion.g{j}.", f"readout{j}."]
                if j == 1:
                    prefixes += ["contrast1.", "contrast2."]
                elif j == 2:
                    prefixes += ["contrast2."]
                group = [t for t in self._by_prefix(prefixes) if id(t) not in claimed]
                claimed.update(id(t) for t in group)
                groups.append(group)
        else:
            groups.append(self._by_prefix(["backbone.", "contrast", "direct.", "readout1."]))
        return groups

    def _by_prefix(self, prefixes: list[str]) -> list[Tensor]:
        return [t for name, t in self.params.items()
                if any(name.startswith(p) for p in prefixes)]

    def loss(self, images, target_values: np.ndarray, *, alpha: float = 0.0005,
             eps: float = 1e-8) -> tuple[Tensor, ModelOutput]:
        """Total training loss for a batch against normalized target densities."""
        out = self.forward(images)
        target = AttentionMap(constant(np.asarray(target_values)), normalized=True)
        loss = total_loss(out.rough, out.final, target, alpha,
                          self.branch_param_groups(), eps)
        return loss, out

    def zero_grad(self) -> None:
        self.params.zero_grad()
