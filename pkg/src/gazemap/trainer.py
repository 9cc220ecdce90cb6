"""RMSProp training loop with validation-based early stopping.

The optimizer keeps two accumulators per parameter: a decayed average of
squared gradients and a momentum buffer over the normalized update,

    s <- rho * s + (1 - rho) * g^2
    m <- mu * m + lr * g / sqrt(s + eps)
    p <- p - m

Weight decay is not applied here; the squared-parameter penalty enters
through the loss, so its gradient is already part of g.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gazemap.autodiff import ParamStore, backward
from gazemap.model import SaliencyModel

__all__ = ["TrainConfig", "TrainResult", "rmsprop_step", "train"]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 10
    max_epochs: int = 100
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    seed: int = 0
    kl_eps: float = 1e-8
    max_steps: int = 0       # 0 means no step cap
    patience: int = 2        # consecutive rising validation epochs before stopping

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.rms_decay < 1.0:
            raise ValueError(f"rms_decay must be in [0, 1), got {self.rms_decay}")


def rmsprop_step(store: ParamStore, cfg: TrainConfig) -> None:
    """Apply one update to every parameter, then clear gradients."""
    for name, p in store.items():
        if p.grad is None:
            raise ValueError(f"rmsprop_step: gradient missing for parameter {name!r}")
        state = store.opt_state[name]
        g = p.grad
        state["sq"] *= cfg.rms_decay
        state["sq"] += (1.0 - cfg.rms_decay) * g * g
        state["mom"] *= cfg.momentum
        state["mom"] += cfg.learning_rate * g / np.sqrt(state["sq"] + cfg.rms_eps)
        p.values -= state["mom"]
        p.grad = None


@dataclass
class TrainResult:
    checkpoint_path: Path | None
    history: list[dict] = field(default_factory=list)
    best_val: float = float("inf")
    epochs_run: int = 0
    steps_run: int = 0
    diverged: bool = False
    initial_train_loss: float = float("nan")
    final_train_loss: float = float("nan")

    def write_history(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "train_loss", "val_loss"])
            for row in self.history:
                w.writerow([row["step"], repr(row["train_loss"]),
                            "" if row["val_loss"] is None else repr(row["val_loss"])])
        return path


def _stack(samples, indices) -> tuple[np.ndarray, np.ndarray]:
    images = np.concatenate([samples[i].image.values for i in indices], axis=0)
    targets = np.concatenate([samples[i].density.values.values for i in indices], axis=0)
    return images, targets


def _dataset_loss(model: SaliencyModel, samples, cfg: TrainConfig) -> float:
    """Mean per-image total loss over a sample list (forward only)."""
    total = 0.0
    for start in range(0, len(samples), cfg.batch_size):
        idx = range(start, min(start + cfg.batch_size, len(samples)))
        images, targets = _stack(samples, idx)
        loss, _ = model.loss(images, targets, alpha=cfg.weight_decay, eps=cfg.kl_eps)
        total += loss.item() * len(idx)
    return total / len(samples)


def train(model: SaliencyModel, train_samples, val_samples, cfg: TrainConfig,
          out_dir, *, time_budget: float | None = None) -> TrainResult:
    """Minibatch training with epoch shuffling and a best-validation checkpoint.

    Stops when the validation loss rises for ``cfg.patience`` consecutive
    epochs, when ``max_epochs`` (or ``max_steps`` / ``time_budget``, if
    set) is reached, or immediately on a non-finite loss; the last saved
    checkpoint survives an abort untouched.
    """
    from gazemap import dataio  # local import; dataio pulls in metrics

    if not train_samples:
        raise ValueError("training set must not be empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "model.ckpt"
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(checkpoint_path=None)
    result.initial_train_loss = _dataset_loss(model, train_samples, cfg)

    prev_val = None
    rising = 0
    step = 0
    start_time = time.monotonic()
    stop = False
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_samples))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images, targets = _stack(train_samples, idx)
            model.zero_grad()
            loss, _ = model.loss(images, targets, alpha=cfg.weight_decay, eps=cfg.kl_eps)
            lval = loss.item()
            step += 1
            if not np.isfinite(lval):
                result.history.append({"step": step, "train_loss": lval, "val_loss": None})
                result.diverged = True
                stop = True
                break
            backward(loss)
            rmsprop_step(model.params, cfg)
            epoch_losses.append(lval)
            result.history.append({"step": step, "train_loss": lval, "val_loss": None})
            if cfg.max_steps and step >= cfg.max_steps:
                stop = True
                break
            if time_budget is not None and time.monotonic() - start_time > time_budget:
                stop = True
                break

        result.epochs_run = epoch
        result.steps_run = step
        if epoch_losses:
            result.final_train_loss = float(np.mean(epoch_losses))
        if result.diverged:
            break

        if val_samples:
            val = _dataset_loss(model, val_samples, cfg)
            if result.history:
                result.history[-1]["val_loss"] = val
            if not np.isfinite(val):
                result.diverged = True
                break
            if val < result.best_val:
                result.best_val = val
                dataio.save_checkpoint(model.params, ckpt_path)
                result.checkpoint_path = ckpt_path
            rising = rising + 1 if (prev_val is not None and val > prev_val) else 0
            prev_val = val
            if rising >= cfg.patience:
                break
        if stop:
            break

    if result.checkpoint_path is None and not result.diverged:
        dataio.save_checkpoint(model.params, ckpt_path)
        result.checkpoint_path = ckpt_path
    if result.diverged and ckpt_path.exists():
        result.checkpoint_path = ckpt_path
    return result
