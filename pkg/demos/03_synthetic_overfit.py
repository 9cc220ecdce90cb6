"""Overfit a tiny model on a handful of synthetic high-contrast stimuli.

The generator drops one bright or dark patch on a mid-gray background and
samples fixations around it, so a working pipeline should drive the KL
loss down quickly. Uses a narrow model so the whole run takes about a
minute on a CPU.

Run:  python demos/03_synthetic_overfit.py
"""

import tempfile

import numpy as np

from gazemap.dataio import synth_dataset
from gazemap.model import ModelConfig, SaliencyModel
from gazemap.trainer import TrainConfig, train

samples = synth_dataset(8, 64, seed=3)
print(f"dataset: {len(samples)} images, "
      f"{len(samples[0].fixations)} fixations each, 64x64")

model = SaliencyModel(ModelConfig(base_size=64, width_factor=0.03125,
                                  fuse_channels=8, mode="full", seed=3))
print(f"model parameters: {model.params.num_values():,d}")

cfg = TrainConfig(batch_size=4, max_epochs=30, seed=3)
with tempfile.TemporaryDirectory() as out:
    result = train(model, samples, [], cfg, out)

losses = [row["train_loss"] for row in result.history]
print(f"\ninitial loss {result.initial_train_loss:.3f}")
for step in range(0, len(losses), 10):
    bar = "#" * int(40 * losses[step] / losses[0])
    print(f"  step {step:3d}  {losses[step]:7.3f}  {bar}")
print(f"final epoch mean {result.final_train_loss:.3f} "
      f"({result.final_train_loss / result.initial_train_loss:.0%} of initial)")

# Where does the trained model look? Compare argmax against the patch.
rec = samples[0]
pred = model.predict(rec.image.values)[0]
py, px = np.unravel_index(pred.argmax(), pred.shape)
intensity = rec.image.values[0].mean(axis=0)
patch = np.argwhere(np.abs(intensity - 0.5) >= 0.35)
print(f"\nsample 0: predicted peak at (x={px}, y={py}); "
      f"patch spans x {patch[:, 1].min()}..{patch[:, 1].max()}, "
      f"y {patch[:, 0].min()}..{patch[:, 0].max()}")
