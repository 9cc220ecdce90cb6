"""Prediction head: readouts, centre prior, fusion, losses."""

import numpy as np
import pytest

import gazemap.autodiff as ad
from gazemap.head import (
    AttentionMap,
    CentreBias,
    FusionHead,
    Readout,
    kl_divergence,
    kl_loss,
    normalize_map,
    total_loss,
)


def normalized_map(arr):
    arr = np.asarray(arr, dtype=np.float64)
    arr = arr / arr.sum(axis=(1, 2, 3), keepdims=True)
    return AttentionMap(ad.constant(arr), normalized=True)


class TestAttentionMapType:
    def test_single_channel_enforced(self):
        with pytest.raises(ValueError, match="single-channel"):
            AttentionMap(ad.constant(np.zeros((1, 2, 4, 4))))

    def test_check_flags_bad_mass(self):
        m = AttentionMap(ad.constant(np.full((1, 1, 2, 2), 0.3)), normalized=True)
        with pytest.raises(ValueError, match="mass"):
            m.check()

    def test_check_flags_negatives(self):
        m = AttentionMap(ad.constant(np.array([[-0.1, 0.6], [0.2, 0.3]])[None, None]))
        with pytest.raises(ValueError, match="negative"):
            m.check()


class TestNormalizeMap:
    def test_unit_mass_per_image(self):
        rng = np.random.default_rng(0)
        x = ad.constant(rng.uniform(0.0, 1.0, size=(3, 1, 6, 6)))
        out = normalize_map(x)
        assert out.normalized
        np.testing.assert_allclose(out.values.values.sum(axis=(1, 2, 3)), 1.0, atol=1e-12)

    def test_zero_image_falls_back_to_uniform(self):
        x = np.zeros((2, 1, 4, 4))
        x[1, 0, 2, 2] = 3.0
        out = normalize_map(ad.constant(x)).values.values
        np.testing.assert_allclose(out[0], 1.0 / 16.0, atol=1e-15)
        assert out[1, 0, 2, 2] == pytest.approx(1.0)


class TestReadout:
    def test_stage_channels_32_16_1(self):
        store = ad.ParamStore()
        ro = Readout(store, "ro", 8, np.random.default_rng(0))
        assert [s.out_channels for s in ro.stages] == [32, 16, 1]

    def test_spatial_size_preserved(self):
        store = ad.ParamStore()
        ro = Readout(store, "ro", 8, np.random.default_rng(1))
        g = ad.constant(np.random.default_rng(2).normal(size=(2, 8, 9, 9)))
        assert ro(g).dims == (2, 1, 9, 9)

    def test_zero_input_gives_spatially_constant_map(self):
        store = ad.ParamStore()
        ro = Readout(store, "ro", 8, np.random.default_rng(3))
        out = ro(ad.constant(np.zeros((1, 8, 6, 6)))).values
        assert out.max() - out.min() == 0.0

    def test_output_nonnegative(self):
        store = ad.ParamStore()
        ro = Readout(store, "ro", 8, np.random.default_rng(4))
        g = ad.constant(np.random.default_rng(5).normal(size=(1, 8, 7, 7)))
        assert ro(g).values.min() >= 0.0


class TestCentreBias:
    def test_argmax_at_centre(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            store = ad.ParamStore()
            prior = CentreBias(store, "p", 17)
            prior.log_var_x.values[:] = rng.uniform(-1.0, 6.0)
            prior.log_var_y.values[:] = rng.uniform(-1.0, 6.0)
            m = prior.map().values[0, 0]
            assert np.unravel_index(m.argmax(), m.shape) == (8, 8)

    def test_exact_flip_symmetry(self):
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            store = ad.ParamStore()
            prior = CentreBias(store, "p", 16)
            prior.log_var_x.values[:] = rng.uniform(0.0, 6.0)
            prior.log_var_y.values[:] = rng.uniform(0.0, 6.0)
            m = prior.map().values[0, 0]
            np.testing.assert_array_equal(m, m[::-1, :])
            np.testing.assert_array_equal(m, m[:, ::-1])

    def test_total_mass_close_to_one_for_small_sigma(self):
        store = ad.ParamStore()
        size = 64
        prior = CentreBias(store, "p", size, init_sigma=size / 8.0)
        assert prior.map().values.sum() == pytest.approx(1.0, abs=0.05)

    def test_gradient_wrt_log_variances(self):
        store = ad.ParamStore()
        prior = CentreBias(store, "p", 12)
        w = ad.constant(np.random.default_rng(6).normal(size=(1, 1, 12, 12)))
        for p in (prior.log_var_x, prior.log_var_y):
            err = ad.grad_check(lambda t: ad.sum_all(ad.mul(prior.map(), w)), p, h=1e-3)
            assert err <= 1e-4

    def test_batch_replication(self):
        store = ad.ParamStore()
        prior = CentreBias(store, "p", 8)
        out = prior(3)
        assert out.dims == (3, 1, 8, 8)
        np.testing.assert_array_equal(out.values[0], out.values[2])


class TestFusionHead:
    def make(self, n=6, seed=0, **kw):
        store = ad.ParamStore()
        return FusionHead(store, "head", n, np.random.default_rng(seed), **kw), store

    def maps(self, n, seed=1, size=8):
        rng = np.random.default_rng(seed)
        return [ad.constant(rng.uniform(0.0, 1.0, size=(2, 1, size, size)))
                for _ in range(n)]

    def test_output_sums_to_one(self):
        head, _ = self.make()
        out = head(self.maps(6))
        assert out.normalized
        np.testing.assert_allclose(out.values.values.sum(axis=(1, 2, 3)), 1.0, atol=1e-9)

    def test_wrong_map_count_rejected(self):
        head, _ = self.make(n=6)
        with pytest.raises(ValueError, match="expects 6"):
            head(self.maps(5))

    def test_blur_kernel_normalized_7x7(self):
        head, _ = self.make()
        assert head.blur_kernel.dims == (1, 1, 7, 7)
        assert abs(head.blur_kernel.values.sum() - 1.0) <= 1e-12

    def test_smoothing_preserves_interior_mass(self):
        # mass concentrated away from borders survives the blur exactly
        x = np.zeros((1, 1, 16, 16))
        x[0, 0, 6:10, 6:10] = np.random.default_rng(2).uniform(0.5, 1.0, (4, 4))
        blurred = ad.conv2d(ad.constant(x), ad.gaussian_kernel2d(1.5, size=7),
                            padding="same")
        assert blurred.values.sum() == pytest.approx(x.sum(), abs=1e-9)

    def test_permuting_identical_maps_keeps_output(self):
        head, _ = self.make(n=3, seed=3)
        rng = np.random.default_rng(4)
        a = ad.constant(rng.uniform(0.0, 1.0, size=(1, 1, 8, 8)))
        b = ad.constant(a.values.copy())
        c = ad.constant(rng.uniform(0.0, 1.0, size=(1, 1, 8, 8)))
        out1 = head([a, b, c]).values.values
        out2 = head([b, a, c]).values.values
        np.testing.assert_array_equal(out1, out2)

    def test_sum_mode(self):
        head, store = self.make(n=3, seed=5, mode="sum")
        out = head(self.maps(3, seed=6))
        np.testing.assert_allclose(out.values.values.sum(axis=(1, 2, 3)), 1.0, atol=1e-9)
        assert any(name.startswith("head.mix") for name in store.names())


class TestKLLoss:
    def test_identical_uniform_maps_near_zero(self):
        z = normalized_map(np.ones((1, 1, 4, 4)))
        assert kl_loss(z, z, eps=1e-8) .item() <= 1e-7

    def test_identical_random_maps_small(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            z = normalized_map(rng.uniform(0.1, 1.0, size=(1, 1, 5, 5)))
            assert abs(kl_loss(z, z, eps=1e-8).item()) <= 1e-6

    def test_concentrated_target_large_but_finite(self):
        m = np.full((1, 1, 8, 8), 1e-12)
        m[0, 0, 0, 0] = 1.0
        m /= m.sum()
        z = np.zeros((1, 1, 8, 8))
        z[0, 0, 7, 7] = 1.0
        loss = kl_loss(AttentionMap(ad.constant(m), normalized=True),
                       AttentionMap(ad.constant(z), normalized=True), eps=1e-8).item()
        assert np.isfinite(loss) and loss > 5.0

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(7)
        eps = 1e-8
        for _ in range(20):
            m = rng.uniform(0.01, 1.0, size=(2, 1, 6, 6))
            z = rng.uniform(0.01, 1.0, size=(2, 1, 6, 6))
            m /= m.sum(axis=(1, 2, 3), keepdims=True)
            z /= z.sum(axis=(1, 2, 3), keepdims=True)
            got = kl_loss(AttentionMap(ad.constant(m), normalized=True),
                          AttentionMap(ad.constant(z), normalized=True), eps=eps).item()
            want = np.mean([(z[b] * np.log(z[b] / (m[b] + eps) + eps)).sum()
                            for b in range(2)])
            assert got == pytest.approx(want, abs=1e-12)

    def test_never_far_below_zero(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            m = normalized_map(rng.uniform(0.01, 1.0, size=(1, 1, 8, 8)))
            z = normalized_map(rng.uniform(0.01, 1.0, size=(1, 1, 8, 8)))
            assert kl_loss(m, z, eps=1e-8).item() >= -1e-6

    def test_requires_normalized(self):
        raw = AttentionMap(ad.constant(np.ones((1, 1, 2, 2))))
        z = normalized_map(np.ones((1, 1, 2, 2)))
        with pytest.raises(ValueError, match="normalized"):
            kl_loss(raw, z)

    def test_rejects_negative_values(self):
        bad_vals = np.ones((1, 1, 2, 2)) / 4.0
        bad_vals[0, 0, 0, 0] = -0.25
        bad_vals[0, 0, 1, 1] = 0.75
        bad = AttentionMap.__new__(AttentionMap)
        bad.values = ad.constant(bad_vals)
        bad.normalized = True
        z = normalized_map(np.ones((1, 1, 2, 2)))
        with pytest.raises(ValueError, match="nonnegative"):
            kl_loss(bad, z)


class TestTotalLoss:
    def test_zero_when_all_maps_match_target(self):
        # the epsilon guard contributes about eps * (pixels - 1) per term,
        # so the 1e-6 bound presumes small maps
        rng = np.random.default_rng(9)
        z = normalized_map(rng.uniform(0.1, 1.0, size=(1, 1, 4, 4)))
        rough = [normalized_map(z.values.values.copy()) for _ in range(3)]
        loss = total_loss(rough, normalized_map(z.values.values.copy()), z,
                          alpha=0.0, branch_params=[[], [], []], eps=1e-8)
        assert abs(loss.item()) <= 1e-6

    def test_doubling_params_quadruples_decay_term(self):
        rng = np.random.default_rng(10)
        z = normalized_map(rng.uniform(0.1, 1.0, size=(1, 1, 4, 4)))
        rough = [normalized_map(rng.uniform(0.1, 1.0, size=(1, 1, 4, 4)))]
        final = normalized_map(rng.uniform(0.1, 1.0, size=(1, 1, 4, 4)))
        params = [ad.parameter(rng.normal(size=(2, 2, 1, 1))) for _ in range(3)]
        alpha = 0.0005

        def decay(group):
            with_pen = total_loss(rough, final, z, alpha, [group]).item()
            without = total_loss(rough, final, z, 0.0, [group]).item()
            return with_pen - without

        d1 = decay(params)
        doubled = [ad.parameter(2.0 * p.values) for p in params]
        d2 = decay(doubled)
        assert d2 == pytest.approx(4.0 * d1, rel=1e-12)

    def test_alpha_default_matches_training_default(self):
        from gazemap.trainer import TrainConfig
        assert TrainConfig().weight_decay == 0.0005

    def test_group_count_must_match(self):
        z = normalized_map(np.ones((1, 1, 2, 2)))
        with pytest.raises(ValueError, match="parameter group"):
            total_loss([z], z, z, 0.0, branch_params=[])


def test_kl_divergence_gradient():
    rng = np.random.default_rng(11)
    z = rng.random((1, 1, 5, 5))
    z /= z.sum()
    m = ad.parameter(rng.uniform(0.2, 1.0, size=(1, 1, 5, 5)))
    err = ad.grad_check(lambda t: kl_divergence(t, ad.constant(z)), m, h=1e-3)
    assert err <= 1e-4
