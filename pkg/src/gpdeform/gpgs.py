"""Alternating GP / Gaussian-splat optimization.

Every ``n_gp`` iterations (Stage 1) the current deformation state is rendered,
per-primitive confidence ``C_k`` is accumulated, the primitives above a
percentile threshold form the training set, and a sparse GP is fitted on
their (noise-perturbed canonical position, t) -> y pairs. The GP mean at every
(k, t) is then cached and, during the following gradient steps (Stage 2),
pulls deviating deformations towards it:

    L_total = L_recon + lambda * (1/(N T)) sum_{k,t} delta_kt ||y_kt - mu_kt||^2

with ``delta_kt = 1`` when the deviation exceeds an annealed threshold. The
photometric objective of a full splatting pipeline is replaced by a masked
trajectory fit plus temporal smoothness, since this renderer is not
differentiable.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import DivergenceError, StaleGuidanceError
from .inducing import timeseries_init
from .kernels import KernelConfig, MeanConfig
from .seeding import substream, subseed
from .splat import Camera, confidence, orbit_cameras, render
from .svgp import FitConfig, Normalizer, SparseGP, fit

log = logging.getLogger(__name__)


# -- confident subset ---------------------------------------------------------


@dataclass
class ConfidentSubset:
    indices: np.ndarray  # primitive ids with C_k > tau_c
    tau_c: float
    relaxed: bool = False

    def data(self, canonical, times, y):
        """Training pairs over all frames of the selected primitives."""
        idx = self.indices
        T = len(times)
        X = np.column_stack([np.repeat(canonical[idx], T, axis=0), np.tile(times, len(idx))])
        return X, y[idx].reshape(-1, y.shape[-1])


def select_confident(C, percentile: float = 50.0) -> ConfidentSubset:
    """Primitives whose confidence exceeds the given percentile of C."""
    C = np.asarray(C, dtype=np.float64)
    if not np.any(C > 0):
        raise ValueError("no visible primitives")
    tau = float(np.percentile(C, percentile))
    idx = np.flatnonzero(C > tau)
    if idx.size == 0:
        log.warning("empty confident subset at percentile %s; using all C_k > 0", percentile)
        return ConfidentSubset(np.flatnonzero(C > 0), 0.0, relaxed=True)
    return ConfidentSubset(idx, tau)


def perturb_inputs(X, variance: float, rng: np.random.Generator) -> np.ndarray:
    """Add N(0, variance) noise to the spatial columns; t is untouched."""
    X = np.array(X, dtype=np.float64, copy=True)
    if variance > 0:
        X[:, :3] += rng.normal(0.0, math.sqrt(variance), size=(X.shape[0], 3))
    return X


# -- guidance -----------------------------------------------------------------


@dataclass
class GuidanceCache:
    """GP means for every (k, t), plus the per-head output scale."""

    mean: np.ndarray  # (N, T, 9) raw units
    scale: np.ndarray  # (9,) divides deviations into normalized units
    refreshed_at: int = 0
    n_gp: int = 200

    def check(self, iteration: int) -> None:
        if iteration - self.refreshed_at > 2 * self.n_gp:
            raise StaleGuidanceError("stale guidance")


@dataclass
class AnnealSchedule:
    """Linear interpolation from ``start`` (iteration 0) to ``end`` (last iteration)."""

    start: float = 0.1
    end: float = 0.01
    total: int = 1000

    def __post_init__(self):
        if not (self.start > self.end > 0):
            raise ValueError("anneal schedule needs start > end > 0")
        if self.total < 1:
            raise ValueError("anneal schedule needs at least one iteration")

    def value(self, iteration: int) -> float:
        if self.total == 1 or iteration >= self.total - 1:
            return self.end
        return self.start + (self.end - self.start) * iteration / (self.total - 1)


def guidance_loss(y, cache: GuidanceCache, tau: float, iteration: int | None = None):
    """(loss, active count, gradient w.r.t. y) of the thresholded GP guidance term."""
    if iteration is not None:
        cache.check(iteration)
    y = np.asarray(y, dtype=np.float64)
    N, T = y.shape[:2]
    r = y - cache.mean
    # the threshold compares normalized deviations; the penalty stays in raw units
    norm2 = ((r / cache.scale) ** 2).sum(-1)
    delta = norm2 > tau * tau if math.isfinite(tau) else np.zeros_like(norm2, dtype=bool)
    active = int(delta.sum())
    loss = float(((r * r).sum(-1) * delta).sum() / (N * T))
    grad = 2.0 * delta[..., None] * r / (N * T)
    return loss, active, grad


def recon_loss(y, observations, visible, beta: float = 0.01):
    """Masked fit to observations plus mean squared temporal differences."""
    y = np.asarray(y, dtype=np.float64)
    vis = np.asarray(visible, dtype=bool)
    N, T = vis.shape
    r = (y - observations) * vis[..., None]
    n_vis = max(int(vis.sum()), 1)
    fit_term = float((r * r).sum() / n_vis)
    grad = 2.0 * r / n_vis
    dy = y[:, 1:] - y[:, :-1]
    denom = N * (T - 1)
    smooth = beta * float((dy * dy).sum() / denom)
    gs = 2.0 * beta * dy / denom
    grad[:, 1:] += gs
    grad[:, :-1] -= gs
    return fit_term + smooth, grad


class Adam:
    """Bias-corrected adaptive-moment descent on a numpy array."""

    def __init__(self, shape, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return param - lr * mhat / (np.sqrt(vhat) + self.eps)


# -- driver -------------------------------------------------------------------


def _default_gp_fit() -> FitConfig:
    return FitConfig(iterations=300, batch_size=512, learning_rate=1e-2, input_noise=0.02)


class GPGSConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    iterations: int = Field(600, ge=1)
    n_gp: int = Field(200, ge=1)
    guidance: bool = True
    lambda_gp: float = Field(0.1, ge=0)
    tau_start: float = Field(0.1, gt=0)
    tau_end: float = Field(0.01, gt=0)
    beta: float = Field(0.01, ge=0)
    lr: float = Field(1e-2, gt=0)
    lr_final: float = Field(1e-4, gt=0)
    percentile: float = Field(50.0, ge=0, le=100)
    m_spatial: int = Field(8, ge=1)
    m_time: int = Field(6, ge=1)
    gp_fit: FitConfig = Field(default_factory=_default_gp_fit)
    warm_iterations: int = Field(150, ge=0)
    kernel: KernelConfig = KernelConfig()
    mean: MeanConfig = MeanConfig()
    noise_variance: float = Field(1e-2, gt=0)
    cameras: int = Field(1, ge=1)
    image_size: int = Field(64, ge=8)

    @model_validator(mode="after")
    def _tau(self):
        if not self.tau_start > self.tau_end:
            raise ValueError("tau_start must exceed tau_end")
        return self


@dataclass
class OptimizationReport:
    y: np.ndarray
    recon_trace: list[float] = field(default_factory=list)
    guidance_trace: list[float] = field(default_factory=list)
    total_trace: list[float] = field(default_factory=list)
    tau_trace: list[float] = field(default_factory=list)
    active_trace: list[int] = field(default_factory=list)
    elbo_rounds: list[list[float]] = field(default_factory=list)
    refresh_iterations: list[int] = field(default_factory=list)
    confident_rounds: list[list[int]] = field(default_factory=list)
    tau_c_rounds: list[float] = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    gp: SparseGP | None = None

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "recon_trace": self.recon_trace,
            "guidance_trace": self.guidance_trace,
            "total_trace": self.total_trace,
            "tau_trace": self.tau_trace,
            "active_trace": self.active_trace,
            "elbo_rounds": self.elbo_rounds,
            "refresh_iterations": self.refresh_iterations,
            "confident_rounds": self.confident_rounds,
            "tau_c_rounds": self.tau_c_rounds,
        }
        if include_timing:
            d["timing"] = self.timing
        return d


def initial_state(scene) -> np.ndarray:
    """Observations with hidden frames filled by per-primitive linear interpolation."""
    y = scene.observations.copy()
    frames = np.arange(scene.frames)
    for k in range(scene.n):
        vis = scene.visible[k]
        if vis.all():
            continue
        if not vis.any():
            y[k] = scene.deformations[k, :1]  # nothing observed: hold the canonical pose
            continue
        for j in range(y.shape[-1]):
            y[k, ~vis, j] = np.interp(frames[~vis], frames[vis], scene.observations[k, vis, j])
    return y


def scene_cameras(config: GPGSConfig) -> list[Camera]:
    size = config.image_size
    return orbit_cameras(config.cameras, width=size, height=size, scale=2.8 / size)


def compute_confidence(scene, y, cameras) -> np.ndarray:
    outs = (render(scene.primitives, y[:, f], cam, scene.visible[:, f]) for f in range(scene.frames) for cam in cameras)
    return confidence(outs, scene.n)


def _stage1(scene, y, gp, normalizer, config: GPGSConfig, seed: int, round_idx: int, cameras, report):
    C = compute_confidence(scene, y, cameras)
    subset = select_confident(C, config.percentile)
    canonical = scene.primitives.positions
    X, Y = subset.data(canonical, scene.times, y)
    if gp is None:
        lo = np.r_[canonical.min(0), 0.0]
        hi = np.r_[canonical.max(0), 1.0]
        normalizer = Normalizer.from_data(X, Y, x_bounds=(lo, hi))
        traj = canonical[subset.indices, None, :] + y[subset.indices, :, :3]
        m_s = min(config.m_spatial, subset.indices.size)
        init = timeseries_init(traj, canonical[subset.indices], m_s, config.m_time, seed=subseed(seed, "init"))
        gp = SparseGP(init.Z, y.shape[-1], config.kernel, config.mean, config.noise_variance, normalizer)
        fit_cfg = config.gp_fit
    else:
        fit_cfg = config.gp_fit.model_copy(update={"iterations": config.warm_iterations})
    rep = fit(gp, X, Y, fit_cfg, seed=substream(seed, "gp", round_idx))
    report.elbo_rounds.append(rep.elbo_trace)
    report.confident_rounds.append(subset.indices.tolist())
    report.tau_c_rounds.append(subset.tau_c)
    return gp, normalizer


def refresh_cache(gp: SparseGP, scene, iteration: int, n_gp: int) -> GuidanceCache:
    canonical = scene.primitives.positions
    T = scene.frames
    X = np.column_stack([np.repeat(canonical, T, axis=0), np.tile(scene.times, scene.n)])
    mean, _ = gp.predict(X)
    return GuidanceCache(mean.reshape(scene.n, T, -1), gp.normalizer.y_std.copy(), iteration, n_gp)


def run(scene, config: GPGSConfig | None = None, seed: int = 0, y0=None, gp: SparseGP | None = None) -> OptimizationReport:
    """Alternate GP fitting and guided deformation updates; see module docstring.

    A pre-trained ``gp`` skips the first Stage-1 fit; later rounds warm-start it.
    """
    config = config or GPGSConfig()
    y = initial_state(scene) if y0 is None else np.array(y0, dtype=np.float64, copy=True)
    report = OptimizationReport(y=y)
    cameras = scene_cameras(config)
    adam = Adam(y.shape)
    anneal = AnnealSchedule(config.tau_start, config.tau_end, config.iterations)
    pretrained = gp is not None
    normalizer = gp.normalizer if pretrained else None
    cache = None
    t_gp = t_gs = 0.0
    decay = (config.lr_final / config.lr) ** (1.0 / max(config.iterations - 1, 1))
    for it in range(config.iterations):
        if config.guidance and it % config.n_gp == 0:
            t0 = time.perf_counter()
            if pretrained and it == 0:
                report.elbo_rounds.append([])
                report.confident_rounds.append([])
                report.tau_c_rounds.append(None)
            else:
                gp, normalizer = _stage1(scene, y, gp, normalizer, config, seed, len(report.refresh_iterations),
                                         cameras, report)
            cache = refresh_cache(gp, scene, it, config.n_gp)
            report.refresh_iterations.append(it)
            t_gp += time.perf_counter() - t0
        t0 = time.perf_counter()
        rl, grad = recon_loss(y, scene.observations, scene.visible, config.beta)
        tau = anneal.value(it)
        gl, active = 0.0, 0
        if cache is not None:
            gl, active, ggrad = guidance_loss(y, cache, tau, it)
            if config.lambda_gp > 0:
                grad = grad + config.lambda_gp * ggrad
        total = rl + config.lambda_gp * gl
        if not math.isfinite(total):
            raise DivergenceError(f"diverged at iteration {it}", it)
        y = adam.step(y, grad, config.lr * decay**it)
        report.recon_trace.append(rl)
        report.guidance_trace.append(gl)
        report.total_trace.append(total)
        report.tau_trace.append(tau)
        report.active_trace.append(active)
        t_gs += time.perf_counter() - t0
    report.y = y
    report.gp = gp
    report.timing = {"gp_seconds": t_gp, "gs_seconds": t_gs}
    return report


def hidden_mse(y, scene) -> float:
    """Mean squared centre error over hidden (k, t) entries."""
    hidden = ~scene.visible
    if not hidden.any():
        return 0.0
    err = y[..., :3] - scene.deformations[..., :3]
    return float((err[hidden] ** 2).sum(-1).mean())
