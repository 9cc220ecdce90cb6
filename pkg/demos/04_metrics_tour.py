"""The evaluation metrics, their oracles, and their invariances.

Run:  python demos/04_metrics_tour.py
"""

import numpy as np

from gazemap import metrics

rng = np.random.default_rng(0)
size = 32

# Ground truth: fixations around (8, 8), density = blurred impulses.
fix = metrics.FixationSet([(8 + int(rng.normal(0, 2)), 8 + int(rng.normal(0, 2)))
                           for _ in range(12)])
density = metrics.density_from_fixations(fix, size, sigma=2.0)
print(f"density mass: {density.sum():.9f} (always renormalized to 1)")

# Three candidate predictions of varying quality.
yy, xx = np.mgrid[0:size, 0:size]
good = np.exp(-((xx - 8.0) ** 2 + (yy - 8.0) ** 2) / 20.0)
centre = np.exp(-((xx - 15.5) ** 2 + (yy - 15.5) ** 2) / 60.0)  # pure centre prior
flat_noise = rng.random((size, size))

pool = metrics.FixationSet([(24, 20), (22, 25), (25, 24), (20, 22), (26, 21)])
print(f"\n{'prediction':12s} {'cc':>7s} {'nss':>7s} {'auc_judd':>9s} "
      f"{'s_auc':>7s} {'emd':>7s}")
for name, pred in (("good", good), ("centre-only", centre), ("noise", flat_noise)):
    row = metrics.evaluate_prediction(pred, density, fix, shuffled_pool=pool,
                                      splits=50, seed=1, emd_grid=16)
    print(f"{name:12s} {row['cc']:7.3f} {row['nss']:7.3f} {row['auc_judd']:9.3f} "
          f"{row['s_auc']:7.3f} {row['emd']:7.3f}")
print("note how the shuffled AUC punishes the centre-only map: its negatives "
      "come from\nanother image's (off-centre) fixations.")

# AUC rides on ranks only, so any strictly increasing transform is a no-op.
a1 = metrics.auc(good, fix, variant="judd")
a2 = metrics.auc(np.exp(4 * good), fix, variant="judd")
print(f"\njudd AUC invariance under exp(4x): {a1:.9f} vs {a2:.9f}")

# EMD: mass in opposite corners of a 2x2 grid travels the whole diagonal.
a = np.zeros((2, 2)); a[0, 0] = 1
b = np.zeros((2, 2)); b[1, 1] = 1
print(f"EMD of opposite corners on a 2x2 grid: {metrics.emd(a, b, grid=2):.6f}")

# NSS is the standardized saliency at fixated pixels.
print(f"NSS of the good map: {metrics.nss(good, fix):.3f} "
      f"(affine transform: {metrics.nss(5 * good + 3, fix):.3f})")
