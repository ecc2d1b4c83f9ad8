"""Metrics: PSNR, extrapolation baselines, sparsification/AUSE and the step-fit comparison."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .kernels import Matern1D, RBF1D
from .svgp import ExactGP

log = logging.getLogger(__name__)

SPARSIFICATION_STEP = 0.01


# -- PSNR ---------------------------------------------------------------------


def mse(prediction, reference) -> float:
    a = np.asarray(prediction, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(prediction, reference, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB; ``inf`` when the inputs are identical."""
    if not peak > 0:
        raise ValueError("peak must be positive")
    err = mse(prediction, reference)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def bbox_diagonal(points) -> float:
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return float(np.linalg.norm(P.max(0) - P.min(0)))


# -- extrapolation ------------------------------------------------------------


def linear_extrapolation(prefix, horizon: int) -> np.ndarray:
    """Constant-velocity continuation from the last two frames.

    ``prefix`` has time on axis -2, shape (..., T, D); returns (..., horizon, D)
    with ``p(T-1+h) = p(T-1) + h (p(T-1) - p(T-2))`` for h = 1..horizon.
    """
    P = np.asarray(prefix, dtype=np.float64)
    if P.ndim < 2 or P.shape[-2] < 2:
        raise ValueError("prefix shorter than 2 frames")
    last, prev = P[..., -1:, :], P[..., -2:-1, :]
    h = np.arange(1, horizon + 1, dtype=np.float64)[:, None]
    return last + h * (last - prev)


def gp_extrapolation(gp, canonical, times) -> tuple[np.ndarray, np.ndarray]:
    """GP mean and variance at (p_k, t_f) for every primitive and query time, (N, F, d)."""
    canonical = np.asarray(canonical, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    N, F = canonical.shape[0], times.size
    X = np.column_stack([np.repeat(canonical, F, axis=0), np.tile(times, N)])
    mean, var = gp.predict(X)
    return mean.reshape(N, F, -1), var.reshape(N, F, -1)


# -- sparsification -----------------------------------------------------------


@dataclass
class SparsificationCurve:
    fractions: np.ndarray
    oracle: np.ndarray  # normalized mean error, removing largest true errors first
    predicted: np.ndarray  # normalized mean error, removing largest uncertainties first
    uninformative: bool = False

    @property
    def ause(self) -> float:
        return float(np.trapezoid(self.predicted - self.oracle, self.fractions))


def _curve(errors: np.ndarray, order: np.ndarray, fractions: np.ndarray) -> np.ndarray:
    n = errors.size
    # suffix sums: mean of the entries that remain after removing the first r of ``order``
    tail = np.concatenate([np.cumsum(errors[order][::-1])[::-1], [0.0]])
    removed = np.minimum(np.round(fractions * n).astype(int), n)
    kept = n - removed
    return np.where(kept > 0, tail[removed] / np.maximum(kept, 1), 0.0)


def removal_order(values) -> np.ndarray:
    """Indices sorted by decreasing value; ties keep index order."""
    return np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")


def sparsification(errors, uncertainties, step: float = SPARSIFICATION_STEP) -> SparsificationCurve:
    """Oracle and uncertainty-ordered sparsification curves normalized by the full-set error."""
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    u = np.asarray(uncertainties, dtype=np.float64).reshape(-1)
    if e.shape != u.shape:
        raise ValueError("errors and uncertainties differ in length")
    if e.size == 0:
        raise ValueError("empty error set")
    if np.any(u < 0) or not np.all(np.isfinite(u)):
        raise ValueError("uncertainties must be finite and non-negative")
    fractions = np.round(np.arange(0.0, 1.0 + step / 2, step), 10)
    uninformative = bool(np.all(u == u[0]))
    if uninformative:
        log.warning("uninformative ordering: all uncertainties are equal")
    oracle = _curve(e, removal_order(e), fractions)
    predicted = _curve(e, removal_order(u), fractions)
    base = oracle[0]
    if base > 0:
        oracle, predicted = oracle / base, predicted / base
    else:
        uninformative = True
    return SparsificationCurve(fractions, oracle, predicted, uninformative)


def ause(errors, uncertainties, step: float = SPARSIFICATION_STEP) -> float:
    """Area between the uncertainty-ordered and oracle sparsification curves."""
    return sparsification(errors, uncertainties, step).ause


# -- kernel comparison --------------------------------------------------------


def step_data(n: int = 40, noise: float = 0.01, seed: int = 0):
    """Unit step at x = 0 sampled on [-1, 1] with Gaussian noise."""
    x = np.linspace(-1.0, 1.0, n)
    rng = np.random.default_rng(seed)
    return x, (x > 0).astype(np.float64) + noise * rng.normal(size=n)


def step_fit_compare(x, y, kernels=("rbf", "matern"), iterations: int = 200, lr: float = 0.05,
                     lengthscale: float = 0.3, noise_variance: float = 1e-2) -> dict[str, float]:
    """Train RMSE of an exact GP per kernel, hyperparameters optimized with the same budget.

    ``matern`` is the nu = 1/2 member; ``matern-3/2`` and ``matern-5/2`` are also accepted.
    """
    makers = {
        "rbf": lambda: RBF1D(1.0, lengthscale),
        "matern": lambda: Matern1D(0.5, 1.0, lengthscale),
        "matern-1/2": lambda: Matern1D(0.5, 1.0, lengthscale),
        "matern-3/2": lambda: Matern1D(1.5, 1.0, lengthscale),
        "matern-5/2": lambda: Matern1D(2.5, 1.0, lengthscale),
    }
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    out = {}
    for name in kernels:
        if name not in makers:
            raise ValueError(f"unknown kernel {name!r}")
        gp = ExactGP(makers[name](), noise_variance=noise_variance, X=x, y=y)
        gp.optimize(iterations, lr)
        mean, _ = gp.posterior(x)
        out[name] = float(np.sqrt(np.mean((mean - y) ** 2)))
    return out


# -- summaries ----------------------------------------------------------------


def summarize(values) -> dict[str, float]:
    """Median and interquartile range."""
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "iqr": float(q3 - q1), "count": int(v.size)}
