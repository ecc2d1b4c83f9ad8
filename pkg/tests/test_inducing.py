import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpdeform.inducing import (
    DESCRIPTOR_LENGTH,
    baseline_init,
    build_inducing_set,
    extract_descriptors,
    kmeans_landmarks,
    timeseries_init,
    write_inducing_csv,
)


def two_groups(rng, n_each=20, T=40):
    t = np.arange(T) / T
    static = np.repeat(rng.uniform(0, 1, (n_each, 1, 3)), T, axis=1)
    static += 1e-4 * rng.normal(size=static.shape)
    base = rng.uniform(0, 1, (n_each, 1, 3))
    moving = np.repeat(base, T, axis=1)
    moving[:, :, 0] += 0.5 * np.sin(2 * np.pi * 3 * t)[None]
    P = np.concatenate([static, moving])
    return P, P[:, 0]


class TestDescriptors:
    def test_length(self):
        F = extract_descriptors(np.random.default_rng(0).normal(size=(5, 20, 3)))
        assert F.shape == (5, DESCRIPTOR_LENGTH) == (5, 39)

    def test_constant(self):
        P = np.full((1, 16, 3), 0.7)
        f = extract_descriptors(P)[0].reshape(3, 13)
        np.testing.assert_allclose(f[:, 0], 0.7)
        np.testing.assert_allclose(f[:, [1, 4]], 0.0, atol=1e-15)
        np.testing.assert_allclose(f[:, 5:12], 0.0, atol=1e-15)
        assert np.all(f[:, 12] == 0.0)  # zero-variance autocorrelation

    def test_sinusoid_bin(self):
        T = 32
        n = np.arange(T)
        P = np.zeros((1, T, 3))
        P[0, :, 0] = np.sin(2 * np.pi * 2 * n / T)
        f = extract_descriptors(P)[0].reshape(3, 13)
        bins = f[0, 5:12]
        # direct DFT: |sum_n x_n exp(-2 pi i k n / T)| / T
        oracle = np.array([abs(np.sum(P[0, :, 0] * np.exp(-2j * np.pi * k * n / T))) / T for k in range(1, 8)])
        np.testing.assert_allclose(bins, oracle, atol=1e-12)
        assert np.argmax(bins) + 1 == 2

    def test_identical_trajectories(self):
        P = np.random.default_rng(1).normal(size=(1, 10, 3))
        F = extract_descriptors(np.concatenate([P, P]))
        assert np.array_equal(F[0], F[1])

    def test_too_short(self):
        with pytest.raises(ValueError, match="trajectory too short"):
            extract_descriptors(np.zeros((2, 3, 3)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        P = rng.normal(size=(6, 12, 3))
        perm = rng.permutation(6)
        np.testing.assert_array_equal(extract_descriptors(P)[perm], extract_descriptors(P[perm]))


class TestKMeans:
    def test_all_landmarks(self):
        F = np.random.default_rng(0).normal(size=(7, 39))
        assert sorted(kmeans_landmarks(F, 7)) == list(range(7))

    def test_two_groups(self):
        P, _ = two_groups(np.random.default_rng(0))
        idx = kmeans_landmarks(extract_descriptors(P), 2, seed=3)
        assert sorted(i // 20 for i in idx) == [0, 1]

    def test_deterministic(self):
        F = np.random.default_rng(1).normal(size=(50, 39))
        assert np.array_equal(kmeans_landmarks(F, 6, seed=4), kmeans_landmarks(F, 6, seed=4))

    def test_too_many(self):
        with pytest.raises(ValueError, match="too many landmarks"):
            kmeans_landmarks(np.zeros((3, 39)), 4)

    def test_duplicates_still_distinct(self):
        F = np.zeros((10, 39))
        F[5:] = 1.0
        idx = kmeans_landmarks(F, 4)
        assert len(set(idx.tolist())) == 4


class TestInducingSet:
    def test_counts(self):
        init = build_inducing_set(np.zeros((2, 3)), 3)
        assert init.size == 6

    def test_single_time(self):
        assert np.all(build_inducing_set(np.ones((4, 3)), 1).Z[:, 3] == 0.5)

    def test_grid(self):
        init = build_inducing_set(np.random.default_rng(0).normal(size=(8, 3)), 8)
        assert init.size == 64
        np.testing.assert_allclose(np.unique(init.Z[:, 3]), np.arange(8) / 7)

    def test_landmarks_are_actual_primitives(self):
        P, canon = two_groups(np.random.default_rng(2))
        init = timeseries_init(P, canon, 4, 3, seed=0)
        for row in init.spatial:
            assert np.any(np.all(canon == row, axis=1))


class TestBaselines:
    def test_random_reproducible_and_distinct(self):
        rng = np.random.default_rng(0)
        P = rng.normal(size=(100, 10, 3))
        times = np.arange(10) / 9
        a = baseline_init(P, P[:, 0], times, 4, 4, "random", seed=5)
        b = baseline_init(P, P[:, 0], times, 4, 4, "random", seed=5)
        assert np.array_equal(a.Z, b.Z)
        assert len({tuple(r) for r in a.Z}) == 16

    def test_velocity_separates_groups(self):
        P, canon = two_groups(np.random.default_rng(3))
        init = baseline_init(P, canon, np.arange(40) / 39, 2, 2, "velocity-knn", seed=0)
        assert sorted(i // 20 for i in init.landmarks) == [0, 1]


def test_csv_round_trip(tmp_path):
    Z = np.random.default_rng(0).normal(size=(5, 4))
    path = tmp_path / "z.csv"
    write_inducing_csv(path, Z)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["px", "py", "pz", "t"]
    assert np.array_equal(np.array(rows[1:], dtype=float), Z)
