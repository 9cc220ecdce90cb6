"""Named finite-difference checks for every differentiable block.

Each check compares reverse-mode gradients against central differences
(h = 1e-3, double precision) on tiny shapes and reports the max relative
error |analytic - numeric| / max(1, |numeric|). Inputs that feed a relu
are sampled away from the kink so the difference quotient stays valid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

import gazemap.autodiff as ad
from gazemap.attention import RABlock
from gazemap.backbone import Backbone, BackboneConfig
from gazemap.contrast import ContrastBlock, ContrastConfig
from gazemap.fusion import DenseFusion
from gazemap.head import CentreBias, FusionHead, kl_divergence, normalize_map
from gazemap.model import ModelConfig, SaliencyModel

__all__ = ["CheckResult", "run_suite", "CHECK_NAMES"]

_H = 1e-3
_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float = _TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return f"{status} {self.name:28s} max_rel_err={self.max_rel_err:.3e}"


def _away_from_zero(rng, shape, lo=0.05, hi=1.0):
    """Values with |v| >= lo, so relu kinks stay further than 2h away."""
    mag = rng.uniform(lo, hi, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _positive_cone(store: ad.ParamStore, rng) -> None:
    """Rewrite parameters so every relu preactivation is strictly positive.

    Positive inputs x positive weights keep the composite blocks away
    from relu kinks entirely, making central differences valid while
    still exercising the full chain rule. Weights are scaled by fan-in
    so activations neither explode nor vanish across deep stacks.
    """
    for name, p in store.items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(p.dims[1:]))
            p.values[:] = rng.uniform(0.5 / fan_in, 2.0 / fan_in, size=p.dims)
        elif name.endswith(".bias"):
            p.values[:] = 0.05


def _weighted_sum(t: ad.Tensor, weights: np.ndarray) -> ad.Tensor:
    return ad.sum_all(ad.mul(t, ad.constant(weights)))


def _check_conv_input() -> float:
    rng = np.random.default_rng(11)
    x = ad.parameter(rng.normal(size=(1, 2, 6, 6)))
    k = ad.constant(rng.normal(size=(3, 2, 3, 3)))
    b = ad.constant(rng.normal(size=(1, 3, 1, 1)))
    w = rng.normal(size=(1, 3, 6, 6))
    return ad.grad_check(lambda t: _weighted_sum(ad.conv2d(t, k, b), w), x, h=_H)


def _check_conv_kernel() -> float:
    rng = np.random.default_rng(12)
    x = ad.constant(rng.normal(size=(2, 2, 5, 5)))
    k = ad.parameter(rng.normal(size=(3, 2, 3, 3)))
    b = ad.parameter(rng.normal(size=(1, 3, 1, 1)))
    w = rng.normal(size=(2, 3, 5, 5))
    err_k = ad.grad_check(lambda t: _weighted_sum(ad.conv2d(x, t, b), w), k, h=_H)
    err_b = ad.grad_check(lambda t: _weighted_sum(ad.conv2d(x, k, t), w), b, h=_H)
    return max(err_k, err_b)


def _check_conv_strided_dilated() -> float:
    rng = np.random.default_rng(13)
    x = ad.parameter(rng.normal(size=(1, 2, 7, 7)))
    k = ad.constant(rng.normal(size=(2, 2, 3, 3)))
    w1 = rng.normal(size=(1, 2, 3, 3))
    err_s = ad.grad_check(
        lambda t: _weighted_sum(ad.conv2d(t, k, stride=2, padding="valid"), w1), x, h=_H)
    w2 = rng.normal(size=(1, 2, 7, 7))
    err_d = ad.grad_check(
        lambda t: _weighted_sum(ad.conv2d(t, k, dilation=2, padding="same"), w2), x, h=_H)
    return max(err_s, err_d)


def _check_relu() -> float:
    rng = np.random.default_rng(14)
    x = ad.parameter(_away_from_zero(rng, (1, 2, 5, 5)))
    w = rng.normal(size=(1, 2, 5, 5))
    return ad.grad_check(lambda t: _weighted_sum(ad.relu(t), w), x, h=_H)


def _check_sigmoid() -> float:
    rng = np.random.default_rng(15)
    x = ad.parameter(rng.normal(size=(1, 2, 5, 5)))
    w = rng.normal(size=(1, 2, 5, 5))
    return ad.grad_check(lambda t: _weighted_sum(ad.sigmoid(t), w), x, h=_H)


def _check_max_pool() -> float:
    # Distinct integer-spaced values keep the argmax fixed under +-h.
    rng = np.random.default_rng(16)
    vals = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8)
    x = ad.parameter(vals)
    w1 = rng.normal(size=(1, 1, 4, 4))
    err_v = ad.grad_check(lambda t: _weighted_sum(ad.max_pool2d(t, 2, 2), w1), x, h=_H)
    w2 = rng.normal(size=(1, 1, 8, 8))
    err_s = ad.grad_check(
        lambda t: _weighted_sum(ad.max_pool2d(t, 2, 1, padding="same"), w2), x, h=_H)
    return max(err_v, err_s)


def _check_global_avg_pool() -> float:
    rng = np.random.default_rng(17)
    x = ad.parameter(rng.normal(size=(2, 3, 4, 4)))
    w = rng.normal(size=(2, 3, 1, 1))
    return ad.grad_check(lambda t: _weighted_sum(ad.global_avg_pool(t), w), x, h=_H)


def _check_nearest_resize() -> float:
    rng = np.random.default_rng(18)
    x = ad.parameter(rng.normal(size=(1, 2, 3, 3)))
    w = rng.normal(size=(1, 2, 6, 6))
    return ad.grad_check(lambda t: _weighted_sum(ad.nearest_resize(t, 2), w), x, h=_H)


def _check_gaussian_blur() -> float:
    rng = np.random.default_rng(19)
    x = ad.parameter(rng.normal(size=(1, 1, 8, 8)))
    w = rng.normal(size=(1, 1, 8, 8))
    return ad.grad_check(lambda t: _weighted_sum(ad.gaussian_blur(t, 1.2), w), x, h=_H)


def _check_contrast_block() -> float:
    rng = np.random.default_rng(20)
    store = ad.ParamStore()
    cfg = ContrastConfig((0.4, 0.6, 0.9, 1.3, 2.0), out_channels=3)
    block = ContrastBlock(store, "cb", 3, cfg, rng)
    x = ad.parameter(rng.normal(size=(1, 3, 8, 8)))
    w = rng.normal(size=(1, 3, 8, 8))
    err_x = ad.grad_check(lambda t: _weighted_sum(block(t), w), x, h=_H)
    xc = ad.constant(x.values)
    err_w = ad.grad_check(lambda t: _weighted_sum(block(xc), w),
                          block.merge_residual.weight, h=_H)
    return max(err_x, err_w)


def _check_reduction_attention() -> float:
    rng = np.random.default_rng(21)
    store = ad.ParamStore()
    block = RABlock(store, "ra", 3, 2, rng)
    _positive_cone(store, rng)
    x = ad.parameter(rng.uniform(0.1, 1.0, size=(2, 3, 5, 5)))
    w = rng.normal(size=(2, 2, 5, 5))
    err_x = ad.grad_check(lambda t: _weighted_sum(block(t), w), x, h=_H)
    xc = ad.constant(x.values)
    errs = [ad.grad_check(lambda t: _weighted_sum(block(xc), w), p, h=_H)
            for p in (block.reduce.weight, block.fc_weight, block.fc_bias)]
    return max([err_x] + errs)


def _check_dense_combine() -> float:
    rng = np.random.default_rng(22)
    store = ad.ParamStore()
    fusion = DenseFusion(store, "fusion", (2, 2, 2, 2, 2), 4, rng)
    _positive_cone(store, rng)
    s = 16
    feats = tuple(ad.parameter(rng.uniform(0.1, 1.0, size=(1, 2, s // d, s // d)))
                  for d in (1, 2, 4, 8, 8))
    w = rng.normal(size=(1, 4, s, s))

    def g1(_):
        return _weighted_sum(fusion(feats)[0], w)

    errs = [ad.grad_check(g1, fusion.weights[(1, i)], h=_H) for i in range(1, 5)]
    errs.append(ad.grad_check(g1, feats[2], h=_H, sample=12, seed=0))
    return max(errs)


def _check_centre_bias() -> float:
    rng = np.random.default_rng(23)
    store = ad.ParamStore()
    prior = CentreBias(store, "prior", 16)
    w = rng.normal(size=(1, 1, 16, 16))
    err_x = ad.grad_check(lambda t: _weighted_sum(prior.map(), w), prior.log_var_x, h=_H)
    err_y = ad.grad_check(lambda t: _weighted_sum(prior.map(), w), prior.log_var_y, h=_H)
    return max(err_x, err_y)


def _check_kl() -> float:
    rng = np.random.default_rng(24)
    z = rng.random((2, 1, 6, 6))
    z /= z.sum(axis=(1, 2, 3), keepdims=True)
    m = ad.parameter(rng.uniform(0.2, 1.0, size=(2, 1, 6, 6)))
    zc = ad.constant(z)
    return ad.grad_check(lambda t: kl_divergence(t, zc), m, h=_H)


def _check_fusion_head() -> float:
    rng = np.random.default_rng(25)
    store = ad.ParamStore()
    head = FusionHead(store, "head", 3, rng)
    _positive_cone(store, rng)
    x = ad.parameter(rng.uniform(0.1, 1.0, size=(1, 1, 8, 8)))
    others = [ad.constant(rng.uniform(0.1, 1.0, size=(1, 1, 8, 8))) for _ in range(2)]
    z = rng.random((1, 1, 8, 8))
    z /= z.sum()
    zc = ad.constant(z)

    def f(t):
        return kl_divergence(head([t] + others).values, zc)

    return ad.grad_check(f, x, h=_H)


def _check_normalize() -> float:
    rng = np.random.default_rng(26)
    x = ad.parameter(rng.uniform(0.1, 1.0, size=(2, 1, 5, 5)))
    w = rng.normal(size=(2, 1, 5, 5))
    return ad.grad_check(lambda t: _weighted_sum(normalize_map(t).values, w), x, h=_H)


def _check_backbone() -> float:
    rng = np.random.default_rng(27)
    model = SaliencyModel(ModelConfig(base_size=64, width_factor=0.125, mode="SF", seed=5))
    backbone: Backbone = model.backbone
    _positive_cone(model.params, rng)
    x = ad.parameter(rng.uniform(0.1, 1.0, size=(1, 3, 64, 64)))

    def f(t):
        return ad.sum_all(backbone.forward(t).f5)

    # Four stacked pools make +-1e-3 cross argmax ties; 1e-4 stays on one piece.
    return ad.grad_check(f, x, h=1e-4, sample=16, seed=1)


CHECKS: list[tuple[str, Callable[[], float]]] = [
    ("conv2d/input", _check_conv_input),
    ("conv2d/kernel+bias", _check_conv_kernel),
    ("conv2d/stride+dilation", _check_conv_strided_dilated),
    ("activation/relu", _check_relu),
    ("activation/sigmoid", _check_sigmoid),
    ("max_pool2d", _check_max_pool),
    ("global_avg_pool", _check_global_avg_pool),
    ("nearest_resize", _check_nearest_resize),
    ("gaussian_blur", _check_gaussian_blur),
    ("contrast_block", _check_contrast_block),
    ("reduction_attention", _check_reduction_attention),
    ("dense_combine", _check_dense_combine),
    ("centre_bias_map", _check_centre_bias),
    ("kl_loss", _check_kl),
    ("fusion_head", _check_fusion_head),
    ("normalize_map", _check_normalize),
    ("backbone/sampled", _check_backbone),
]

CHECK_NAMES = tuple(name for name, _ in CHECKS)


def run_suite(tolerance: float = _TOL) -> list[CheckResult]:
    return [CheckResult(name, fn(), tolerance) for name, fn in CHECKS]
