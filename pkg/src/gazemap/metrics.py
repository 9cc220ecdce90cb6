"""Saliency evaluation metrics and groundtruth density generation.

All metrics operate on plain 2-D float arrays (maps) and pixel fixation
lists. Conventions:

* Fixation points are (x, y) = (column, row), 0-indexed, in map space.
* Duplicate fixations collapse to a binary fixated-pixel set; NSS and
  the AUC variants score unique fixated pixels.
* AUC is computed as the rank statistic P(saliency at a positive >
  saliency at a negative) + 0.5 P(tie), which equals the trapezoidal
  area under the full ROC polygon.
* EMD is the exact optimal-transport cost between the two maps after
  block-sum downsampling to a small grid, with Euclidean ground distance
  normalized by the grid diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.optimize import linprog
from scipy.stats import rankdata

__all__ = ["FixationSet", "cc", "nss", "auc", "emd", "density_from_fixations",
           "evaluate_prediction", "METRIC_COLUMNS", "DEFAULT_DENSITY_SIGMA_224"]

DEFAULT_DENSITY_SIGMA_224 = 8.0
METRIC_COLUMNS = ("cc", "nss", "auc_judd", "auc_borji", "s_auc", "emd")


@dataclass
class FixationSet:
    """Gaze landing points for one image, (x, y) pixel coordinates."""

    points: list[tuple[int, int]]
    image_id: str = ""

    def __len__(self) -> int:
        return len(self.points)

    def unique_pixels(self, shape: tuple[int, int]) -> np.ndarray:
        """Flat indices of the distinct fixated pixels; validates bounds."""
        h, w = shape
        flat = set()
        for x, y in self.points:
            if not (0 <= x < w and 0 <= y < h):
                raise ValueError(f"fixation ({x},{y}) outside {w}x{h} map")
            flat.add(y * w + x)
        return np.fromiter(sorted(flat), dtype=np.int64)

    def binary_map(self, shape: tuple[int, int]) -> np.ndarray:
        m = np.zeros(shape)
        m.ravel()[self.unique_pixels(shape)] = 1.0
        return m


def _as_map(m) -> np.ndarray:
    # Accepts a 2-D array, a (1,1,H,W) engine tensor, or an AttentionMap.
    while hasattr(m, "values"):
        m = m.values
    arr = np.squeeze(np.asarray(m, dtype=np.float64))
    if arr.ndim != 2:
        raise ValueError(f"expected a single 2-D map, got shape {arr.shape}")
    return arr


def cc(m, z) -> float:
    """Pearson linear correlation between two maps of equal shape."""
    a, b = _as_map(m).ravel(), _as_map(z).ravel()
    if a.shape != b.shape:
        raise ValueError(f"cc: shape mismatch {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt((da * da).mean()), np.sqrt((db * db).mean())
    if sa == 0 or sb == 0:
        raise ValueError("cc undefined: at least one map is constant")
    return float((da * db).mean() / (sa * sb))


def nss(m, fix: FixationSet) -> float:
    """Mean of the standardized map over the fixated pixels."""
    a = _as_map(m)
    if len(fix) == 0:
        raise ValueError("nss requires at least one fixation")
    mu, sd = a.mean(), a.std()
    if sd == 0:
        raise ValueError("nss undefined: map is constant")
    normed = (a - mu) / sd
    return float(normed.ravel()[fix.unique_pixels(a.shape)].mean())


def _rank_auc(pos_vals: np.ndarray, neg_vals: np.ndarray) -> float:
    npos, nneg = len(pos_vals), len(neg_vals)
    ranks = rankdata(np.concatenate([pos_vals, neg_vals]))
    return float((ranks[:npos].sum() - npos * (npos + 1) / 2.0) / (npos * nneg))


def auc(m, positives: FixationSet, *, variant: str = "judd",
        negatives: FixationSet | None = None, splits: int = 100, seed: int = 0) -> float:
    """ROC area for a saliency map against fixated pixels.

    judd: negatives are all non-fixated pixels. borji: ``splits`` draws
    of |positives| uniformly random pixels, mean over draws. shuffled:
    negatives drawn from another images' fixation pool instead.
    """
    a = _as_map(m)
    if len(positives) == 0:
        raise ValueError("auc requires a nonempty positive set")
    flat = a.ravel()
    pos_idx = positives.unique_pixels(a.shape)
    pos_vals = flat[pos_idx]

    if variant == "judd":
        mask = np.ones(flat.size, dtype=bool)
        mask[pos_idx] = False
        return _rank_auc(pos_vals, flat[mask])

    rng = np.random.default_rng(seed)
    if variant == "borji":
        pool = None
    elif variant == "shuffled":
        if negatives is None or len(negatives) == 0:
            raise ValueError("shuffled auc requires a nonempty negative fixation pool")
        pool = negatives.unique_pixels(a.shape)
    else:
        raise ValueError(f"unknown auc variant {variant!r}")

    n = len(pos_vals)
    scores = []
    for _ in range(splits):
        if pool is None:
            neg_idx = rng.integers(0, flat.size, size=n)
        elif pool.size >= n:
            neg_idx = rng.choice(pool, size=n, replace=False)
        else:
            neg_idx = rng.choice(pool, size=n, replace=True)
        scores.append(_rank_auc(pos_vals, flat[neg_idx]))
    return float(np.mean(scores))


def _block_sum(a: np.ndarray, grid: int) -> np.ndarray:
    h, w = a.shape
    fh, fw = h // grid, w // grid
    return a[:grid * fh, :grid * fw].reshape(grid, fh, grid, fw).sum(axis=(1, 3))


def _largest_divisor_at_most(n: int, cap: int) -> int:
    for g in range(min(cap, n), 0, -1):
        if n % g == 0:
            return g
    return 1


def emd(m, z, grid: int = 32) -> float:
    """Exact optimal-transport distance between two mass-normalized maps.

    Both maps are block-sum downsampled to at most ``grid`` cells per
    side (the largest divisor of the map size is used), normalized to
    unit mass, and the transportation linear program is solved exactly;
    ground distances are Euclidean between cell centres divided by the
    grid diagonal.
    """
    a, b = _as_map(m), _as_map(z)
    if a.shape != b.shape:
        raise ValueError(f"emd: shape mismatch {a.shape} vs {b.shape}")
    if not 1 <= grid <= 32:
        raise ValueError(f"grid must be in 1..32, got {grid}")
    g = _largest_divisor_at_most(a.shape[0], grid)
    if a.shape[0] != a.shape[1]:
        g = 1  # non-square maps are not expected; degenerate to global mass
    pa, pb = _block_sum(a, g), _block_sum(b, g)
    if pa.sum() <= 0 or pb.sum() <= 0:
        raise ValueError("emd requires maps with positive total mass")
    pa, pb = (pa / pa.sum()).ravel(), (pb / pb.sum()).ravel()
    # Masses below 1e-15 move the cost by less than the solver tolerance but
    # can trip the LP presolve; drop them.
    for p in (pa, pb):
        p[p < 1e-15] = 0.0
        p /= p.sum()

    yy, xx = np.mgrid[0:g, 0:g].astype(np.float64)
    pts = np.column_stack([yy.ravel(), xx.ravel()])
    dist = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1])
    diag = np.hypot(g - 1, g - 1) if g > 1 else 1.0
    cost = (dist / diag).ravel()

    # The two normalized masses can disagree by a few ulps, which makes the
    # balanced equality system infeasible. Ship from the (ulp-)larger side
    # with "row sums <= supply, column sums >= demand" instead; the ground
    # distance is symmetric, so swapping the sides changes nothing.
    if pa.sum() < pb.sum():
        pa, pb = pb, pa
    n = g * g
    row_i = np.repeat(np.arange(n), n)
    col_i = np.tile(np.arange(n), n) + n
    var_i = np.arange(n * n)
    coeff = np.concatenate([np.ones(n * n), -np.ones(n * n)])
    a_ub = sparse.coo_matrix(
        (coeff, (np.concatenate([row_i, col_i]), np.concatenate([var_i, var_i]))),
        shape=(2 * n, n * n)).tocsr()
    rhs = np.concatenate([pa, -pb])
    res = linprog(cost, A_ub=a_ub, b_ub=rhs, bounds=(0, None), method="highs")
    if res.status != 0:
        # presolve occasionally misjudges near-degenerate masses
        res = linprog(cost, A_ub=a_ub, b_ub=rhs, bounds=(0, None), method="highs",
                      options={"presolve": False})
    if res.status != 0:
        raise RuntimeError(f"emd transport solve failed: {res.message}")
    return float(res.fun)


def gaussian_blur_array(a: np.ndarray, sigma: float) -> np.ndarray:
    """Zero-padded separable Gaussian smoothing of a plain 2-D array."""
    from gazemap.autodiff import gaussian_kernel1d

    g = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(a, g, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, g, axis=1, mode="constant", cval=0.0)


def density_from_fixations(fix: FixationSet, size: int, sigma: float | None = None) -> np.ndarray:
    """Binary fixation impulses blurred with a Gaussian, renormalized to sum 1."""
    if len(fix) == 0:
        raise ValueError("density_from_fixations requires at least one fixation")
    if sigma is None:
        sigma = DEFAULT_DENSITY_SIGMA_224 * size / 224.0
    impulses = fix.binary_map((size, size))
    dens = gaussian_blur_array(impulses, sigma)
    total = dens.sum()
    if total <= 0:
        raise ValueError("density map has zero mass")
    return dens / total


def evaluate_prediction(pred, density, fix: FixationSet, *,
                        shuffled_pool: FixationSet | None = None, splits: int = 100,
                        seed: int = 0, emd_grid: int = 32) -> dict[str, float]:
    """All metric columns for one prediction; s_auc is NaN without a pool."""
    out = {
        "cc": cc(pred, density),
        "nss": nss(pred, fix),
        "auc_judd": auc(pred, fix, variant="judd"),
        "auc_borji": auc(pred, fix, variant="borji", splits=splits, seed=seed),
        "emd": emd(pred, density, grid=emd_grid),
    }
    if shuffled_pool is not None and len(shuffled_pool) > 0:
        out["s_auc"] = auc(pred, fix, variant="shuffled", negatives=shuffled_pool,
                           splits=splits, seed=seed)
    else:
        out["s_auc"] = float("nan")
    return {k: out[k] for k in METRIC_COLUMNS}
