"""Run configuration: a strict key=value text file with documented defaults."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from gazemap.model import MODES, ModelConfig
from gazemap.trainer import TrainConfig

__all__ = ["RunConfig", "parse_config", "load_config"]


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of the pipeline; unknown keys are rejected at parse time."""

    # model
    base_size: int = 224          # input/output map size (64, 112 or 224)
    width_factor: float = 1.0     # channel-width scale of the backbone
    fuse_channels: int = 0        # common fused width; 0 = max(8, 256 * width_factor)
    mode: str = "full"            # NCF | CF | SF | DCF | DenCF | DenCF+CBP | full
    fusion: str = "network"       # final fusion: attention stack or literal sum
    # optimizer
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 4           # desk-scale default; the reference setting is 10
    max_epochs: int = 100
    max_steps: int = 0            # 0 = unlimited
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    kl_eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.0     # held-out share of the manifest for early stopping
    # metrics
    density_sigma: float = 0.0    # groundtruth blur, px; 0 = 8 * base_size / 224
    emd_grid: int = 32
    auc_splits: int = 100

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(base_size=self.base_size, width_factor=self.width_factor,
                           fuse_channels=self.fuse_channels, mode=self.mode,
                           fusion=self.fusion, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, momentum=self.momentum,
                           weight_decay=self.weight_decay, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, max_steps=self.max_steps,
                           rms_decay=self.rms_decay, rms_eps=self.rms_eps,
                           seed=self.seed, kl_eps=self.kl_eps)

    def resolved_density_sigma(self) -> float:
        return self.density_sigma if self.density_sigma > 0 else 8.0 * self.base_size / 224.0

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(RunConfig))


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse key=value lines ('#' comments allowed); unknown keys are errors."""
    values: dict = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"line {ln}: unknown configuration key {key!r}")
        values[key] = _coerce(key, val)
    if overrides:
        values.update(overrides)
    return RunConfig(**values)


def _coerce(key: str, val: str):
    kind = _FIELD_TYPES[key]
    if kind in ("int", int):
        return int(val)
    if kind in ("float", float):
        return float(val)
    return val


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), overrides)
