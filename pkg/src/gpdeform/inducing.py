"""Inducing-point initialization from primitive trajectories.

Spatial landmarks are chosen by clustering trajectory descriptors with
k-means and taking, per cluster, the member closest to the centroid. The
landmarks' canonical positions are crossed with uniformly spaced times to
form ``Z`` (M = M_spatial * M_time).

The descriptor is a fixed 13-feature summary per axis (moments, mean speed,
the first eight DFT bins, lag-1 autocorrelation); it stands in for a
learned time-series embedding.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

FFT_BINS = 8  # DFT bins 0..7; bin 0 is carried by the mean feature
FEATURES_PER_AXIS = 5 + FFT_BINS
DESCRIPTOR_LENGTH = 3 * FEATURES_PER_AXIS


@dataclass
class InducingInit:
    """Inducing inputs plus the pieces they were built from.

    ``spatial`` and ``times`` are ``None`` for the random baseline, whose
    points are not a Cartesian product.
    """

    Z: np.ndarray  # (M, 4) columns px, py, pz, t
    spatial: np.ndarray | None = None  # (M_spatial, 3)
    times: np.ndarray | None = None  # (M_time,)
    landmarks: np.ndarray | None = None  # primitive indices

    @property
    def size(self) -> int:
        return self.Z.shape[0]


def _axis_features(x: np.ndarray) -> np.ndarray:
    """13 features of one scalar series, vectorized over rows of ``x`` (N, T)."""
    T = x.shape[1]
    mean = x.mean(1)
    std = x.std(1)
    speed = np.abs(np.diff(x, axis=1)).mean(1)
    spec = np.abs(np.fft.rfft(x, axis=1)) / T
    bins = np.zeros((x.shape[0], FFT_BINS - 1))
    avail = min(FFT_BINS - 1, spec.shape[1] - 1)
    bins[:, :avail] = spec[:, 1:1 + avail]
    c = x - mean[:, None]
    den = (c * c).sum(1)
    num = (c[:, 1:] * c[:, :-1]).sum(1)
    # zero-variance series get autocorrelation 0 by convention
    ac = np.divide(num, den, out=np.zeros_like(num), where=den > 1e-24)
    return np.column_stack([mean, std, x.min(1), x.max(1), speed, bins, ac])


def extract_descriptors(trajectories) -> np.ndarray:
    """Descriptors for (N, T, 3) trajectories, shape (N, 39).

    Per axis: mean, std, min, max, mean |step|, |DFT| bins 1..7 divided by T,
    lag-1 autocorrelation. The mean plays the role of DFT bin 0.
    """
    P = np.asarray(trajectories, dtype=np.float64)
    if P.ndim != 3 or P.shape[2] != 3:
        raise ValueError("trajectories must have shape (N, T, 3)")
    if P.shape[1] < 4:
        raise ValueError("trajectory too short")
    return np.concatenate([_axis_features(P[:, :, j]) for j in range(3)], axis=1)


def _standardize(F: np.ndarray) -> np.ndarray:
    std = F.std(0)
    return (F - F.mean(0)) / np.where(std > 1e-12, std, 1.0)


def kmeans_landmarks(descriptors, m_spatial: int, seed: int = 0, n_init: int = 3, max_iter: int = 50) -> np.ndarray:
    """Indices of the primitives nearest each k-means centroid (sorted)."""
    F = np.asarray(descriptors, dtype=np.float64)
    n = F.shape[0]
    if m_spatial > n:
        raise ValueError("too many landmarks")
    if m_spatial < 1:
        raise ValueError("m_spatial must be at least 1")
    if m_spatial == n:
        return np.arange(n)
    Fs = _standardize(F)
    with warnings.catch_warnings():
        # duplicate descriptors can leave fewer distinct clusters than requested
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(m_spatial, init="k-means++", n_init=n_init, max_iter=max_iter, random_state=seed).fit(Fs)
    d2 = ((Fs[:, None, :] - km.cluster_centers_[None]) ** 2).sum(-1)
    chosen: list[int] = []
    taken = np.zeros(n, dtype=bool)
    for c in range(m_spatial):
        members = np.flatnonzero((km.labels_ == c) & ~taken)
        pool = members if members.size else np.flatnonzero(~taken)
        i = int(pool[np.argmin(d2[pool, c])])
        chosen.append(i)
        taken[i] = True
    return np.sort(np.asarray(chosen))


def temporal_samples(m_time: int, time_range=(0.0, 1.0)) -> np.ndarray:
    if m_time < 1:
        raise ValueError("m_time must be at least 1")
    lo, hi = float(time_range[0]), float(time_range[1])
    if m_time == 1:
        return np.array([0.5 * (lo + hi)])
    return lo + (hi - lo) * np.arange(m_time) / (m_time - 1)


def build_inducing_set(landmarks, m_time: int, time_range=(0.0, 1.0)) -> InducingInit:
    """Cartesian product of landmark positions (M_spatial, 3) and M_time times."""
    P = np.asarray(landmarks, dtype=np.float64).reshape(-1, 3)
    t = temporal_samples(m_time, time_range)
    Z = np.column_stack([np.repeat(P, len(t), axis=0), np.tile(t, len(P))])
    return InducingInit(Z, P, t)


def velocity_descriptors(trajectories) -> np.ndarray:
    """Per-axis mean speed, (N, 3)."""
    P = np.asarray(trajectories, dtype=np.float64)
    return np.abs(np.diff(P, axis=1)).mean(1)


def timeseries_init(trajectories, canonical, m_spatial: int, m_time: int, seed: int = 0,
                    time_range=(0.0, 1.0)) -> InducingInit:
    idx = kmeans_landmarks(extract_descriptors(trajectories), m_spatial, seed)
    init = build_inducing_set(np.asarray(canonical)[idx], m_time, time_range)
    init.landmarks = idx
    return init


def baseline_init(trajectories, canonical, times, m_spatial: int, m_time: int,
                  variant: Literal["random", "velocity-knn"], seed: int = 0,
                  time_range=(0.0, 1.0)) -> InducingInit:
    """Baseline inducing sets of the same size M = m_spatial * m_time.

    ``random`` draws M distinct (canonical position, time) pairs from the
    observed N x T grid. ``velocity-knn`` clusters per-axis mean speeds
    instead of full descriptors.
    """
    canonical = np.asarray(canonical, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    m = m_spatial * m_time
    if variant == "random":
        n, T = canonical.shape[0], times.shape[0]
        if m > n * T:
            raise ValueError("too many landmarks")
        flat = np.random.default_rng(seed).choice(n * T, size=m, replace=False)
        k, f = np.divmod(flat, T)
        return InducingInit(np.column_stack([canonical[k], times[f]]))
    if variant == "velocity-knn":
        idx = kmeans_landmarks(velocity_descriptors(trajectories), m_spatial, seed)
        init = build_inducing_set(canonical[idx], m_time, time_range)
        init.landmarks = idx
        return init
    raise ValueError(f"unknown init variant {variant!r}")


def write_inducing_csv(path, Z) -> None:
    """Dump ``Z`` with columns px, py, pz, t at round-trip precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["px", "py", "pz", "t"])
        for row in np.asarray(Z, dtype=np.float64):
            w.writerow([repr(float(v)) for v in row])
