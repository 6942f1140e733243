import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from depthforge.core import normalize_depth
from depthforge.errors import DimensionMismatch, EmptyReliableSet, InvalidConfig, SingularFit
from depthforge.refine import (RefineConfig, RefineState, blend_weights, certainty_mask, fit_scale_shift,
                               guidance_features, morphological_open, mspn_step, propagate, refine,
                               reliable_depth)
from depthforge.stochastic import EnsembleStats

masks = hnp.arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def mspn_reference(depth, mask, g, window, sigma2, h, gamma_max, eps):
    """Pixel-by-pixel evaluation of one propagation step from the pre-step state."""
    H, W = depth.shape
    r = window // 2
    out_d = np.zeros((H, W))
    out_m = mask.copy()
    inv_h2 = 1.0 / h ** 2
    for i in range(H):
        for j in range(W):
            num = 0.0
            den = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    y, x = i + dy, j + dx
                    if not (0 <= y < H and 0 <= x < W) or not mask[y, x]:
                        continue
                    d2 = (g[i, j, 0] - g[y, x, 0]) ** 2
                    for k in range(1, g.shape[2]):
                        d2 += (g[i, j, k] - g[y, x, k]) ** 2
                    a = np.exp(-d2 * inv_h2)
                    num += a * depth[y, x]
                    den += a
            if mask[i, j]:
                gam = gamma_max * min(1.0, sigma2[i, j] / eps)
                out_d[i, j] = (1.0 - gam) * depth[i, j] + gam * (num / den)
            elif den > 0:
                out_d[i, j] = num / den
                out_m[i, j] = True
    return out_d, out_m


def stats_of(mu, sigma2):
    return EnsembleStats(mu_hat=np.asarray(mu, float), sigma2_hat=np.asarray(sigma2, float), n_samples=10)


class TestCertaintyMask:
    def test_example(self):
        assert certainty_mask(np.array([[0.005, 0.02]]), 0.01).tolist() == [[True, False]]

    def test_zero_variance_and_huge_eps(self, rng):
        s = rng.random((4, 4))
        assert certainty_mask(np.zeros((3, 3)), 0.01).all()
        assert certainty_mask(s, 1e300).all()

    def test_eps_positive(self):
        with pytest.raises(InvalidConfig):
            certainty_mask(np.zeros(2), 0.0)

    @given(hnp.arrays(float, 10, elements=st.floats(0, 1)), st.floats(1e-6, 1), st.floats(1e-6, 1))
    def test_monotone_in_eps(self, s, e1, e2):
        lo, hi = sorted((e1, e2))
        assert np.all(certainty_mask(s, lo) <= certainty_mask(s, hi))


class TestOpening:
    def test_isolated_pixel_removed(self):
        m = np.zeros((5, 5), bool)
        m[2, 2] = True
        assert not morphological_open(m, 1).any()

    def test_all_ones_kept(self):
        assert morphological_open(np.ones((6, 4), bool), 2).all()

    def test_radius_zero_identity(self, rng):
        m = rng.random((5, 5)) < 0.5
        assert np.array_equal(morphological_open(m, 0), m)

    @given(masks, st.integers(0, 3))
    def test_idempotent_and_anti_extensive(self, m, r):
        o = morphological_open(m, r)
        assert np.array_equal(morphological_open(o, r), o)
        assert not (o & ~m).any()

    @given(masks, st.integers(0, 2), st.randoms(use_true_random=False))
    def test_increasing(self, m, r, rnd):
        sub = m & (np.random.default_rng(rnd.randint(0, 999)).random(m.shape) < 0.7)
        assert not (morphological_open(sub, r) & ~morphological_open(m, r)).any()


class TestReliableDepth:
    def test_all_certain(self):
        d = np.array([[1.0, 2.0], [0.0, 3.0]])
        m = d > 0
        out, keep = reliable_depth(d, m, np.ones((2, 2), bool))
        assert np.array_equal(out, d) and np.array_equal(keep, m)

    def test_none_certain(self):
        with pytest.raises(EmptyReliableSet):
            reliable_depth(np.ones((2, 2)), np.ones((2, 2), bool), np.zeros((2, 2), bool))

    def test_and(self, rng):
        d = rng.random((6, 6)) + 1
        m, s = rng.random((6, 6)) < 0.5, rng.random((6, 6)) < 0.5
        m[0, 0] = s[0, 0] = True
        out, keep = reliable_depth(d, m, s)
        assert np.array_equal(keep, m & s) and np.array_equal(out > 0, m & s)


class TestScaleShift:
    def test_two_points(self):
        f = fit_scale_shift(np.array([2.0, 4.0]), np.array([0.0, 1.0]), np.array([True, True]))
        assert (f.a, f.b, f.residual_rms, f.support_count) == (2.0, 2.0, 0.0, 2)

    def test_constant_regressor(self):
        with pytest.raises(SingularFit):
            fit_scale_shift(np.array([1.0, 2.0, 3.0]), np.full(3, 0.5), np.ones(3, bool))

    def test_recovers_known_line_within_three_se(self):
        rng = np.random.default_rng(17)
        x = rng.uniform(-1, 1, 1000)
        y = 1.7 * x + 0.3 + rng.normal(0, 0.01, 1000)
        f = fit_scale_shift(y, x, np.ones(1000, bool))
        X = np.column_stack([x, np.ones_like(x)])
        cov = 0.01 ** 2 * np.linalg.inv(X.T @ X)
        assert abs(f.a - 1.7) < 3 * np.sqrt(cov[0, 0])
        assert abs(f.b - 0.3) < 3 * np.sqrt(cov[1, 1])

    def test_least_squares_optimality(self):
        rng = np.random.default_rng(3)
        x, y = rng.random(50), rng.random(50) * 3
        f = fit_scale_shift(y, x, np.ones(50, bool))
        best = np.sum((y - f.apply(x)) ** 2)
        for da, db in rng.normal(0, 0.1, (100, 2)):
            assert np.sum((y - ((f.a + da) * x + f.b + db)) ** 2) >= best


class TestGuidance:
    def test_uniform_inputs_give_zero_gradients(self):
        g = guidance_features(np.full((5, 6, 3), 0.4), np.ones((5, 6)), np.full((5, 6), 2.0), np.zeros((5, 6)))
        assert g.shape == (5, 6, 8)
        assert np.all(g[..., 3] == 0) and np.all(g[..., 5] == 0)

    def test_channels_unit_range(self, rng):
        g = guidance_features(rng.random((7, 7, 3)), rng.random((7, 7)), rng.random((7, 7)), rng.random((7, 7)))
        for k in range(8):
            c = g[..., k]
            assert (c.min(), c.max()) in ((0.0, 1.0), (0.0, 0.0))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            guidance_features(np.zeros((3, 3, 3)), np.zeros((3, 3)), np.zeros((3, 4)), np.zeros((3, 3)))


class TestMspnStep:
    def test_single_seed_spreads(self):
        d = np.zeros((5, 5))
        d[2, 2] = 2.5
        s = mspn_step(RefineState(d, d > 0), np.zeros((5, 5, 8)), 3, np.zeros((5, 5)))
        assert s.mask[1:4, 1:4].all() and s.mask.sum() == 9
        assert np.all(s.depth[1:4, 1:4] == 2.5)

    def test_full_mask_no_blend_is_identity(self, rng):
        d = rng.random((6, 6)) + 1
        s = mspn_step(RefineState(d, np.ones((6, 6), bool)), rng.random((6, 6, 8)), 3, np.ones((6, 6)),
                      gamma_max=0.0)
        assert np.array_equal(s.depth, d)

    @pytest.mark.parametrize("window", [3, 5])
    def test_matches_reference(self, rng, window):
        d = rng.uniform(1, 5, (8, 8))
        m = rng.random((8, 8)) < 0.3
        g = rng.random((8, 8, 8))
        s2 = rng.random((8, 8)) * 0.02
        out = mspn_step(RefineState(np.where(m, d, 0.0), m), g, window, s2, 0.5, 0.3, 0.01)
        ref_d, ref_m = mspn_reference(np.where(m, d, 0.0), m, g, window, s2, 0.5, 0.3, 0.01)
        assert np.array_equal(out.mask, ref_m)
        assert np.array_equal(out.depth, ref_d)

    def test_bad_window(self):
        with pytest.raises(InvalidConfig):
            mspn_step(RefineState(np.ones((3, 3)), np.ones((3, 3), bool)), np.zeros((3, 3, 8)), 4, np.zeros((3, 3)))

    def test_blend_weights(self):
        assert blend_weights(np.array([0.0, 0.005, 0.5]), 0.01, 0.3).tolist() == [0.0, 0.15, 0.3]


class TestRefine:
    def test_dense_clean_passthrough(self, rng):
        d = rng.uniform(1, 4, (10, 10))
        dn, _ = normalize_depth(d)
        out = refine(d, np.ones((10, 10), bool), stats_of(dn, np.zeros((10, 10))), rng.random((10, 10, 3)),
                     cfg=RefineConfig(gamma_max=0.0))
        assert np.array_equal(out, d)

    def test_normalized_input_with_params(self, rng):
        d = rng.uniform(1, 4, (10, 10))
        d[rng.random((10, 10)) < 0.6] = 0.0
        m = d > 0
        dn, norm = normalize_depth(d, m)
        st_ = stats_of(rng.random((10, 10)), rng.random((10, 10)) * 0.005)
        rgb = rng.random((10, 10, 3))
        np.testing.assert_allclose(refine(dn, m, st_, rgb, norm=norm), refine(d, m, st_, rgb), rtol=1e-12)

    def test_dense_output_from_sparse(self, rng):
        d = np.zeros((32, 32))
        idx = rng.choice(32 * 32, 40, replace=False)
        d.flat[idx] = rng.uniform(1, 5, 40)
        r = refine(d, d > 0, stats_of(rng.random((32, 32)), np.zeros((32, 32))), rng.random((32, 32, 3)),
                   cfg=RefineConfig(fill_remaining=False, open_radius=0), return_details=True)
        assert r.mask.all() and np.all(r.depth > 0)

    def test_deterministic(self, rng):
        d = np.where(rng.random((12, 12)) < 0.3, rng.uniform(1, 3, (12, 12)), 0.0)
        d[0, :2] = (1.0, 2.0)
        args = (d, d > 0, stats_of(rng.random((12, 12)), rng.random((12, 12)) * 0.02), rng.random((12, 12, 3)))
        assert np.array_equal(refine(*args), refine(*args))

    def test_propagate_mask_grows(self, rng):
        d = np.zeros((9, 9))
        d[4, 4] = 1.0
        g = rng.random((9, 9, 8))
        prev = d > 0
        state = RefineState(d, prev)
        for _ in range(4):
            state = mspn_step(state, g, 3, np.zeros((9, 9)))
            assert not (prev & ~state.mask).any()
            prev = state.mask
        assert propagate(d, d > 0, g, np.zeros((9, 9)), RefineConfig(iterations=1)).mask.all()

    @pytest.mark.parametrize("kw", [{"eps": 0}, {"windows": (4,)}, {"gamma_max": 2}, {"iterations": -1}])
    def test_config_validation(self, kw):
        with pytest.raises(InvalidConfig):
            RefineConfig(**kw)
