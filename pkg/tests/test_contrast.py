"""Contrast block: intensity map, pyramid, squared residuals, learnable merge."""

import numpy as np
import pytest

import gazemap.autodiff as ad
from gazemap.contrast import (
    DEFAULT_SIGMAS,
    ContrastBlock,
    ContrastConfig,
    gaussian_pyramid,
    intensity_map,
)

CFG_SMALL = ContrastConfig((0.5, 0.8, 1.2, 1.9, 3.0), out_channels=3)


def make_block(in_channels=3, cfg=CFG_SMALL, seed=0):
    store = ad.ParamStore()
    return ContrastBlock(store, "cb", in_channels, cfg, np.random.default_rng(seed)), store


def test_default_sigma_list_at_base_224():
    cfg = ContrastConfig.for_base(224, 8)
    assert cfg.sigmas == (5.0, 10.0, 20.0, 40.0, 80.0)
    assert cfg.sigmas == DEFAULT_SIGMAS


def test_sigmas_scale_with_base_size():
    cfg = ContrastConfig.for_base(64, 8)
    np.testing.assert_allclose(cfg.sigmas, np.array(DEFAULT_SIGMAS) * 64 / 224)


def test_sigmas_must_increase():
    with pytest.raises(ValueError, match="increasing"):
        ContrastConfig((1.0, 1.0, 2.0, 3.0, 4.0), 4)


def test_intensity_identity_for_single_channel():
    rng = np.random.default_rng(0)
    x = ad.constant(rng.normal(size=(1, 1, 4, 4)))
    np.testing.assert_array_equal(intensity_map(x).values, x.values)


def test_intensity_mean_of_channels():
    x = np.zeros((1, 3, 2, 2))
    x[0, 0], x[0, 1], x[0, 2] = 0.0, 2.0, 4.0
    out = intensity_map(ad.constant(x))
    np.testing.assert_array_equal(out.values, np.full((1, 1, 2, 2), 2.0))


def test_intensity_matches_per_pixel_mean_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 6, 6))
    out = intensity_map(ad.constant(x))
    np.testing.assert_array_equal(out.values[:, 0], x.mean(axis=1))


def test_pyramid_preserves_constant_input():
    x = ad.constant(np.full((1, 1, 12, 12), 0.37))
    pyr = gaussian_pyramid(x, CFG_SMALL)
    assert pyr.dims == (1, 5, 12, 12)
    np.testing.assert_allclose(pyr.values, 0.37, atol=1e-12)


def test_pyramid_variance_nonincreasing_in_sigma():
    rng = np.random.default_rng(2)
    x = ad.constant(rng.normal(size=(1, 1, 24, 24)))
    pyr = gaussian_pyramid(x, CFG_SMALL).values[0]
    variances = pyr.reshape(5, -1).var(axis=1)
    assert np.all(np.diff(variances) <= 1e-12)


def test_residual_channel_count_is_5x():
    block, _ = make_block(in_channels=8, cfg=ContrastConfig((0.5, 0.8, 1.2, 1.9, 3.0), 8))
    rng = np.random.default_rng(3)
    o = ad.constant(rng.normal(size=(1, 8, 6, 6)))
    pyr = gaussian_pyramid(intensity_map(o), block.cfg)
    assert block.squared_residuals(o, pyr).dims == (1, 40, 6, 6)


def test_squared_residuals_nonnegative():
    block, _ = make_block()
    rng = np.random.default_rng(4)
    o = ad.constant(rng.normal(size=(1, 3, 8, 8)))
    pyr = gaussian_pyramid(intensity_map(o), block.cfg)
    assert block.squared_residuals(o, pyr).values.min() >= 0.0


def test_constant_input_leaves_only_pyramid_branch():
    """A spatially constant input has zero residuals everywhere."""
    block, _ = make_block()
    o_vals = np.zeros((1, 3, 8, 8))
    o_vals[0, 0], o_vals[0, 1], o_vals[0, 2] = 0.2, 0.2, 0.2
    o = ad.constant(o_vals)
    pyr = gaussian_pyramid(intensity_map(o), block.cfg)
    np.testing.assert_allclose(block.squared_residuals(o, pyr).values, 0.0, atol=1e-28)
    out = block(o)
    pyramid_only = block.merge_pyramid(pyr)
    np.testing.assert_allclose(out.values, pyramid_only.values, atol=1e-15)


def test_forced_weights_reproduce_pyramid():
    cfg = ContrastConfig((0.5, 0.8, 1.2, 1.9, 3.0), out_channels=5)
    block, _ = make_block(in_channels=5, cfg=cfg, seed=7)
    block.merge_residual.weight.values[:] = 0.0
    block.merge_pyramid.weight.values[:] = np.eye(5).reshape(5, 5, 1, 1)
    rng = np.random.default_rng(5)
    o = ad.constant(rng.normal(size=(1, 5, 10, 10)))
    out = block(o)
    pyr = gaussian_pyramid(intensity_map(o), cfg)
    np.testing.assert_allclose(out.values, pyr.values, atol=1e-12)


def test_uniform_shift_changes_only_pyramid_branch():
    """(o + c) - (obar + c) = o - obar: residuals are shift invariant."""
    block, _ = make_block(seed=8)
    rng = np.random.default_rng(6)
    o1 = ad.constant(rng.normal(size=(1, 3, 8, 8)))
    o2 = ad.constant(o1.values + 0.773)
    pyr1 = gaussian_pyramid(intensity_map(o1), block.cfg)
    pyr2 = gaussian_pyramid(intensity_map(o2), block.cfg)
    r1 = block.squared_residuals(o1, pyr1)
    r2 = block.squared_residuals(o2, pyr2)
    np.testing.assert_allclose(r1.values, r2.values, atol=1e-12)
    diff = block(o2).values - block(o1).values
    branch_diff = block.merge_pyramid(pyr2).values - block.merge_pyramid(pyr1).values
    np.testing.assert_allclose(diff, branch_diff, atol=1e-12)


def test_gradient_through_block():
    block, _ = make_block(seed=9)
    rng = np.random.default_rng(7)
    x = ad.parameter(rng.normal(size=(1, 3, 8, 8)))
    w = ad.constant(rng.normal(size=(1, 3, 8, 8)))
    err = ad.grad_check(lambda t: ad.sum_all(ad.mul(block(t), w)), x, h=1e-3)
    assert err <= 1e-4


def test_channel_mismatch_rejected():
    block, _ = make_block(in_channels=3)
    with pytest.raises(ValueError, match="channels"):
        block(ad.constant(np.zeros((1, 4, 8, 8))))


def test_merge_layers_have_no_bias():
    block, store = make_block()
    assert block.merge_residual.bias is None
    assert block.merge_pyramid.bias is None
    assert all(name.endswith(".weight") for name in store.names())
