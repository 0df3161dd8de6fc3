import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from paimfl.grad_core import GradientVector, clip_l2
from paimfl.privacy_ops import (PrivacyParams, apply_pipeline, gsr_reset, laplace_perturb,
                                pas_subsample, subsample_size)

INF = PrivacyParams(epsilon=float("inf"))


class TestParams:
    @pytest.mark.parametrize("kw, msg", [(dict(gamma=0), "gamma ∈ \\(0,1\\]"), (dict(gamma=1.2), "gamma"),
                                         (dict(beta=1.5), "beta ∈ \\[0,1\\]"), (dict(epsilon=0), "epsilon"),
                                         (dict(t=-1), "t must"), (dict(clip=0), "clip"),
                                         (dict(delta=1.0), "delta")])
    def test_rejects(self, kw, msg):
        with pytest.raises(ValueError, match=msg):
            PrivacyParams(**kw)

    def test_defaults(self):
        p = PrivacyParams()
        assert p.delta_f == 2.0 and p.noise_scale == 20.0
        assert PrivacyParams(sensitivity=1.0, epsilon=0.1).noise_scale == 10.0

    def test_delta_vs_dimension(self):
        PrivacyParams(delta=1e-6).check_dimension(1000)
        with pytest.raises(ValueError, match="delta"):
            PrivacyParams(delta=1e-4).check_dimension(1000)


class TestLaplace:
    def test_degenerate_scale(self, rng):
        g = GradientVector(rng.normal(size=50))
        assert laplace_perturb(g, INF, rng) == g

    def test_empty(self, rng):
        assert laplace_perturb(GradientVector.zeros(0), PrivacyParams(), rng).d == 0

    def test_seeded(self):
        g = GradientVector(np.ones(20))
        a = laplace_perturb(g, PrivacyParams(), np.random.default_rng(5))
        b = laplace_perturb(g, PrivacyParams(), np.random.default_rng(5))
        assert a == b

    def test_nonfinite_rejected(self, rng):
        with pytest.raises(ValueError):
            laplace_perturb(np.array([np.inf]), PrivacyParams(), rng)


class TestPas:
    def test_gamma_one_identity(self, rng):
        g = GradientVector(rng.normal(size=40))
        assert pas_subsample(g, 1.0, rng) == g

    def test_paper_size(self, rng):
        out = pas_subsample(GradientVector(rng.normal(size=100)), 0.07, rng)
        assert np.count_nonzero(out.values) == 7

    @pytest.mark.parametrize("gamma", [0.0, 1.5])
    def test_bad_gamma(self, gamma, rng):
        with pytest.raises(ValueError, match="gamma"):
            pas_subsample(GradientVector(np.ones(3)), gamma, rng)

    def test_k_at_least_one(self):
        assert subsample_size(0.01, 5) == 1
        assert subsample_size(0.07, 1000) == 70

    @settings(max_examples=60)
    @given(arrays(np.float64, st.integers(1, 80), elements=st.floats(-10, 10)),
           st.floats(0.01, 1.0), st.integers(0, 2**32 - 1))
    def test_support_and_fidelity(self, v, gamma, seed):
        out = pas_subsample(GradientVector(v), gamma, np.random.default_rng(seed)).values
        k = subsample_size(gamma, v.size)
        kept = np.flatnonzero(out)
        assert kept.size <= k
        # kept values are bit-exact copies
        assert np.array_equal(out[kept], v[kept])
        if np.count_nonzero(v) == v.size:
            assert kept.size == k

    def test_ties_deterministic(self):
        g = GradientVector(np.ones(10))
        a = pas_subsample(g, 0.3, np.random.default_rng(9))
        assert a == pas_subsample(g, 0.3, np.random.default_rng(9))


class TestGsr:
    def test_unanimous_sign(self, rng):
        g = GradientVector(rng.random(30) + 0.1)
        assert gsr_reset(g, 1, 0, rng) == g

    def test_off_interval(self, rng):
        g = GradientVector(rng.normal(size=30))
        assert gsr_reset(g, 100, 17, rng) == g
        assert gsr_reset(g, 0, 0, rng) == g

    def test_all_zero(self, rng):
        assert gsr_reset(GradientVector.zeros(5), 1, 0, rng) == GradientVector.zeros(5)

    def test_binomial_half(self):
        v = np.concatenate([np.ones(50), -np.ones(50)])
        rng = np.random.default_rng(0)
        pos = [np.count_nonzero(gsr_reset(v, 1, 0, rng).values > 0) for _ in range(1000)]
        # mean of 1000 Binomial(100, 0.5) draws: sd of the mean is 5/sqrt(1000)
        assert abs(np.mean(pos) - 50) <= 3 * 5 / np.sqrt(1000)

    @given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-5, 5)), st.integers(0, 2**32 - 1),
           st.booleans())
    def test_magnitudes_conserved(self, v, seed, exact):
        out = gsr_reset(v, 1, 0, np.random.default_rng(seed), exact_counts=exact).values
        assert np.array_equal(np.sort(np.abs(out)), np.sort(np.abs(v)))
        assert np.array_equal(out == 0, v == 0)
        if exact:
            assert np.count_nonzero(out > 0) == np.count_nonzero(v > 0)


class TestPipeline:
    def test_degenerate_is_clip(self, rng):
        g = GradientVector(rng.normal(size=64) * 3)
        out, tr = apply_pipeline(g, PrivacyParams(epsilon=float("inf"), gamma=1.0, t=100), 3, rng)
        assert out == clip_l2(g, 1.0)
        assert tr.signs_flipped == 0

    def test_trace(self, rng):
        out, tr = apply_pipeline(GradientVector(rng.normal(size=100)), PrivacyParams(), 0, rng)
        assert tr.kept_k == 7 and np.count_nonzero(out.values) == 7
        assert tr.round == 0 and tr.post_p1_norm > tr.pre_norm

    def test_deterministic(self):
        g = GradientVector(np.linspace(-1, 1, 50))
        a = apply_pipeline(g, PrivacyParams(), 0, np.random.default_rng(4))
        b = apply_pipeline(g, PrivacyParams(), 0, np.random.default_rng(4))
        assert a == b

    def test_noise_before_subsample(self):
        # P1 runs before P2: kept entries carry noise, so they differ from the clipped input
        g = GradientVector(np.linspace(0.01, 0.02, 200))
        params = PrivacyParams(epsilon=1.0, t=0)
        out, _ = apply_pipeline(g, params, 1, np.random.default_rng(0))
        kept = np.flatnonzero(out.values)
        clipped = clip_l2(g, 1.0).values
        assert not np.any(out.values[kept] == clipped[kept])
        assert np.max(np.abs(out.values[kept])) > 1.0
