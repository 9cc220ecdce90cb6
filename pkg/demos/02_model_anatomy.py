"""What the saliency model is made of, layer group by layer group.

Run:  python demos/02_model_anatomy.py
"""

from collections import Counter

import numpy as np

from gazemap.model import MODES, ModelConfig, SaliencyModel

cfg = ModelConfig(base_size=64, width_factor=0.125, mode="full", seed=0)
model = SaliencyModel(cfg)

print(f"mode={cfg.mode}  base={cfg.base_size}  width_factor={cfg.width_factor}")
print(f"fused channel width: {model.fuse_channels}")

groups = Counter()
for name, t in model.params.items():
    groups[name.split(".")[0]] += t.values.size
total = sum(groups.values())
print(f"\nparameters by component ({total:,} total):")
for comp, count in sorted(groups.items(), key=lambda kv: -kv[1]):
    print(f"  {comp:10s} {count:8,d}  ({100 * count / total:.1f}%)")

rng = np.random.default_rng(1)
image = rng.random((1, 3, 64, 64))
out = model.forward(image)

print("\nfeature resolutions (base 64):")
for key in ("c1", "c2", "f3", "f4", "f5"):
    print(f"  {key}: {out.sources[key].dims}")
print("fused representations:", [g.dims for g in out.fused][0], "x 5")
print("rough maps:", len(out.rough), "| final map:", out.final.values.dims,
      "| prior:", None if out.prior is None else out.prior.dims)
print("final map mass per image:", out.final.values.values.sum(axis=(1, 2, 3)))

print("\nablation variants and their parameter budgets:")
for mode in MODES:
    m = SaliencyModel(ModelConfig(base_size=64, width_factor=0.125, mode=mode, seed=0))
    n_rough = 5 if m.combiner == "dense" else 1
    print(f"  {mode:10s} params={m.params.num_values():8,d}  rough maps={n_rough}  "
          f"prior={'yes' if m.centre_bias else 'no ':3s} "
          f"attention={'yes' if m.attention else 'no'}")
