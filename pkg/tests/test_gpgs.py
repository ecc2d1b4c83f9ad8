import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpdeform.errors import DivergenceError, StaleGuidanceError
from gpdeform.gpgs import (
    Adam,
    AnnealSchedule,
    GPGSConfig,
    GuidanceCache,
    guidance_loss,
    hidden_mse,
    initial_state,
    perturb_inputs,
    recon_loss,
    refresh_cache,
    run,
    select_confident,
)
from gpdeform.scene import IDENTITY_6D, Primitives, generate_scene
from gpdeform.splat import Camera, confidence, render
from gpdeform.svgp import FitConfig, SparseGP

FAST = dict(iterations=200, n_gp=100, m_spatial=4, m_time=4, warm_iterations=30,
            gp_fit=FitConfig(iterations=60, batch_size=256, input_noise=0.02))


def cache_of(mean, n_gp=100, at=0):
    return GuidanceCache(np.asarray(mean, float), np.ones(mean.shape[-1]), at, n_gp)


class TestSelectConfident:
    def test_median_half(self):
        C = 1.0 + 1e-6 * np.random.default_rng(0).uniform(size=40)
        sub = select_confident(C)
        assert sub.indices.size == 20 and not sub.relaxed

    def test_exact_ties_fall_back(self, caplog):
        sub = select_confident(np.ones(10))
        assert sub.relaxed and sub.indices.size == 10
        assert "empty confident subset" in caplog.text

    def test_percentile_zero(self):
        sub = select_confident(np.array([0.0, 1.0, 2.0, 3.0]), percentile=0)
        assert sub.indices.tolist() == [1, 2, 3]

    def test_all_zero(self):
        with pytest.raises(ValueError, match="no visible primitives"):
            select_confident(np.zeros(5))

    def test_hidden_twins_excluded(self):
        # 16 separated identical splats; half hidden for a third of the frames
        g = np.linspace(-1.0, 1.0, 4)
        pos = np.array([[x, y, 0.0] for x in g for y in g])
        n, T = len(pos), 9
        prims = Primitives(pos, np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 3), 0.05), np.full(n, 0.8),
                           np.ones((n, 3)))
        y = np.tile(np.r_[0.0, 0.0, 0.0, IDENTITY_6D], (n, 1))
        hidden = np.arange(0, n, 2)
        vis = np.ones((n, T), bool)
        vis[hidden, 3:6] = False
        C = confidence([render(prims, y, Camera(), vis[:, f]) for f in range(T)], n)
        sub = select_confident(C)
        assert set(sub.indices) == set(range(1, n, 2))

    def test_data_layout(self):
        sub = select_confident(np.array([0.0, 2.0, 1.0]), percentile=50)
        canonical = np.arange(9.0).reshape(3, 3)
        times = np.array([0.0, 0.5, 1.0])
        y = np.arange(3 * 3 * 9.0).reshape(3, 3, 9)
        X, Y = sub.data(canonical, times, y)
        np.testing.assert_array_equal(X[:, :3], np.repeat(canonical[[1]], 3, 0))
        np.testing.assert_array_equal(X[:, 3], times)
        np.testing.assert_array_equal(Y, y[1])


class TestPerturb:
    def test_zero_noise(self):
        X = np.random.default_rng(0).normal(size=(20, 4))
        np.testing.assert_array_equal(perturb_inputs(X, 0.0, np.random.default_rng(1)), X)

    def test_variance_and_time(self):
        X = np.tile([0.1, -0.2, 0.3, 0.7], (10_000, 1))
        Xt = perturb_inputs(X, 0.02, np.random.default_rng(2))
        var = Xt[:, :3].var(axis=0, ddof=1)
        assert np.all(np.abs(var - 0.02) < 0.1 * 0.02)
        np.testing.assert_array_equal(Xt[:, 3], X[:, 3])


class TestGuidance:
    def test_match_zero(self):
        mu = np.random.default_rng(0).normal(size=(5, 4, 9))
        assert guidance_loss(mu.copy(), cache_of(mu), 0.01)[:2] == (0.0, 0)

    def test_single_deviation(self):
        mu = np.zeros((5, 4, 9))
        y = mu.copy()
        y[2, 1, :3] = [0.3, 0.0, 0.4]
        loss, active, _ = guidance_loss(y, cache_of(mu), 0.1)
        assert active == 1 and loss == pytest.approx(0.25 / 20, rel=1e-15)

    def test_infinite_threshold(self):
        rng = np.random.default_rng(1)
        loss, active, grad = guidance_loss(rng.normal(size=(3, 3, 9)), cache_of(np.zeros((3, 3, 9))), math.inf)
        assert loss == 0.0 and active == 0 and not grad.any()

    def test_stale(self):
        c = cache_of(np.zeros((2, 2, 9)), n_gp=10, at=5)
        guidance_loss(np.zeros((2, 2, 9)), c, 0.1, iteration=25)
        with pytest.raises(StaleGuidanceError, match="stale guidance"):
            guidance_loss(np.zeros((2, 2, 9)), c, 0.1, iteration=26)

    def test_gradient_fd(self):
        rng = np.random.default_rng(2)
        mu = rng.normal(size=(4, 3, 9))
        y = mu + rng.normal(scale=0.2, size=mu.shape)
        cache = GuidanceCache(mu, rng.uniform(0.5, 2.0, 9))
        tau = 0.3
        _, _, grad = guidance_loss(y, cache, tau)
        delta = (((y - mu) / cache.scale) ** 2).sum(-1) > tau**2

        def frozen(v):
            return (((v - mu) ** 2).sum(-1) * delta).sum() / 12

        h = 1e-6
        fd = np.zeros_like(y)
        for idx in np.ndindex(y.shape):
            e = np.zeros_like(y)
            e[idx] = h
            fd[idx] = (frozen(y + e) - frozen(y - e)) / (2 * h)
        assert np.abs(fd - grad).max() / np.abs(grad).max() < 1e-6

    def test_raw_unit_gradient(self):
        mu = np.zeros((2, 2, 9))
        y = np.full((2, 2, 9), 0.5)
        _, _, grad = guidance_loss(y, cache_of(mu), 0.1)
        np.testing.assert_allclose(grad, 2 * y / 4)

    def test_scale_sets_threshold_only(self):
        mu = np.zeros((5, 4, 9))
        y = mu.copy()
        y[2, 1, :3] = [0.03, 0.0, 0.04]  # raw norm 0.05, normalized norm 0.5
        cache = GuidanceCache(mu, np.full(9, 0.1))
        loss, active, grad = guidance_loss(y, cache, 0.1)
        assert active == 1 and loss == pytest.approx(0.0025 / 20, rel=1e-12)
        np.testing.assert_allclose(grad, 2 * y / 20)
        assert guidance_loss(y, GuidanceCache(mu, np.ones(9)), 0.1)[1] == 0

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.integers(0, 1000))
    def test_threshold_monotone(self, t1, t2, seed):
        rng = np.random.default_rng(seed)
        mu = rng.normal(size=(6, 5, 9))
        y = mu + rng.normal(scale=0.3, size=mu.shape)
        lo, hi = sorted((t1, t2))
        assert guidance_loss(y, cache_of(mu), hi)[1] <= guidance_loss(y, cache_of(mu), lo)[1]


class TestAnneal:
    def test_linear_and_exact_end(self):
        s = AnnealSchedule(0.1, 0.01, 50)
        vals = [s.value(i) for i in range(50)]
        assert vals[0] == 0.1 and vals[-1] == 0.01
        assert all(b <= a for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("args", [(0.01, 0.1, 10), (0.1, 0.0, 10), (0.1, 0.1, 10), (0.1, 0.01, 0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            AnnealSchedule(*args)


class TestRecon:
    def test_gradient_fd(self):
        rng = np.random.default_rng(3)
        y, obs = rng.normal(size=(3, 5, 9)), rng.normal(size=(3, 5, 9))
        vis = rng.uniform(size=(3, 5)) > 0.3
        _, grad = recon_loss(y, obs, vis, beta=0.05)
        h = 1e-6
        fd = np.zeros_like(y)
        for idx in np.ndindex(y.shape):
            e = np.zeros_like(y)
            e[idx] = h
            fd[idx] = (recon_loss(y + e, obs, vis, 0.05)[0] - recon_loss(y - e, obs, vis, 0.05)[0]) / (2 * h)
        np.testing.assert_allclose(grad, fd, atol=1e-8)

    def test_zero_at_static_match(self):
        y = np.tile(np.arange(9.0), (2, 4, 1))
        loss, grad = recon_loss(y, y, np.ones((2, 4), bool))
        assert loss == 0.0 and not grad.any()

    def test_adam_first_step(self):
        opt = Adam((3,))
        p = opt.step(np.zeros(3), np.array([2.0, -0.5, 0.0]), 0.1)
        np.testing.assert_allclose(p, [-0.1, 0.1, 0.0], atol=1e-7)


class TestInitialState:
    def test_interpolates_hidden(self):
        sc = generate_scene(kind="slider", n=16, frames=20, noise=0.0,
                            occlusion={"fraction": 0.25, "start": 5, "end": 10})
        y = initial_state(sc)
        vis = sc.visible
        np.testing.assert_array_equal(y[vis], sc.observations[vis])
        lin = np.flatnonzero((sc.motion == 2) & ~vis.all(1))
        assert lin.size
        np.testing.assert_allclose(y[lin, :, :3], sc.deformations[lin, :, :3], atol=1e-12)


@pytest.fixture(scope="module")
def small_scene():
    return generate_scene(kind="windmill", n=32, frames=30, noise=0.005, seed=0,
                          occlusion={"fraction": 0.25, "start": 10, "end": 20})


class TestRun:
    def test_noise_floor(self):
        sc = generate_scene(kind="windmill", n=32, frames=30, noise=0.005, seed=0)
        r = run(sc, GPGSConfig(guidance=False, iterations=600), seed=0)
        rms = np.sqrt(((r.y - sc.observations) ** 2).mean(axis=(0, 1)))
        assert np.all(rms < 1.5 * 0.005)

    def test_lambda_zero_matches_guidance_free(self, small_scene):
        a = run(small_scene, GPGSConfig(lambda_gp=0.0, **FAST), seed=4)
        b = run(small_scene, GPGSConfig(guidance=False, **FAST), seed=4)
        assert np.array_equal(a.y, b.y)
        assert a.refresh_iterations == [0, 100] and b.refresh_iterations == []

    def test_refresh_cadence_and_report(self, small_scene):
        cfg = GPGSConfig(**{**FAST, "iterations": 250})
        r = run(small_scene, cfg, seed=1)
        gaps = np.diff(r.refresh_iterations + [cfg.iterations])
        assert r.refresh_iterations[0] == 0 and gaps.max() <= cfg.n_gp
        assert len(r.elbo_rounds) == 3 and len(r.elbo_rounds[0]) == 60 and len(r.elbo_rounds[1]) == 30
        assert r.tau_trace[-1] == cfg.tau_end and len(r.tau_trace) == 250
        assert set(r.confident_rounds[0]) <= set(range(32))
        json.dumps(r.to_dict(), allow_nan=False)
        assert "timing" not in r.to_dict() and "gp_seconds" in r.to_dict(include_timing=True)["timing"]

    def test_deterministic(self, small_scene):
        a = run(small_scene, GPGSConfig(**FAST), seed=2)
        b = run(small_scene, GPGSConfig(**FAST), seed=2)
        assert np.array_equal(a.y, b.y) and a.to_dict() == b.to_dict()

    def test_fixed_point(self, small_scene):
        X, _ = small_scene.inputs()
        gp = SparseGP(X[::37], 9)
        mu = refresh_cache(gp, small_scene, 0, 100).mean
        sc = copy.copy(small_scene)
        sc.observations = mu.copy()
        sc.visible = np.ones_like(small_scene.visible)
        r = run(sc, GPGSConfig(**{**FAST, "iterations": 100, "beta": 0.0}), y0=mu, gp=gp)
        assert max(r.guidance_trace) == 0.0 and max(r.active_trace) == 0
        assert r.refresh_iterations == [0]

    def test_divergence(self, small_scene):
        y0 = initial_state(small_scene)
        y0[0, 0, 0] = np.inf
        with pytest.raises(DivergenceError, match="diverged at iteration 0"):
            run(small_scene, GPGSConfig(guidance=False, iterations=5), y0=y0)

    def test_hidden_mse(self, small_scene):
        assert hidden_mse(small_scene.deformations, small_scene) == 0.0
        y = small_scene.deformations.copy()
        y[..., 0] += 0.1
        assert hidden_mse(y, small_scene) == pytest.approx(0.01)
