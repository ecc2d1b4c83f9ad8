"""Experiment protocols shared by the command line and the acceptance checks.

Each function returns plain data; writing artifacts is left to :mod:`gpdeform.cli`.
"""

from __future__ import annotations

import numpy as np

from .config import ExperimentConfig
from .evaluate import bbox_diagonal, gp_extrapolation, linear_extrapolation, psnr, sparsification
from .gpgs import OptimizationReport, hidden_mse, run
from .inducing import InducingInit, baseline_init, timeseries_init
from .scene import generate_scene, mc_uncertainty
from .seeding import subseed, substream
from .splat import Camera, render, render_uncertainty
from .svgp import FitReport, Normalizer, SparseGP, fit


def make_scene(cfg: ExperimentConfig, seed: int, **overrides):
    return generate_scene(cfg.scene.model_copy(update={"seed": seed, **overrides}))


def make_init(variant: str, trajectories, canonical, times, m_spatial: int, m_time: int, seed: int,
              time_range=(0.0, 1.0)) -> InducingInit:
    if variant == "timeseries":
        return timeseries_init(trajectories, canonical, m_spatial, m_time, seed=seed, time_range=time_range)
    return baseline_init(trajectories, canonical, times, m_spatial, m_time, variant, seed=seed,
                         time_range=time_range)


def fit_offline(scene, cfg: ExperimentConfig, variant: str, seed: int, train_frames: int | None = None):
    """Fit a GP to the visible observations of the first ``train_frames`` frames."""
    T = scene.frames if train_frames is None else train_frames
    canonical = scene.primitives.positions
    X, Y = scene.inputs(frames=np.arange(T))
    # fixed bounds keep time in sequence units when training on a prefix
    bounds = (np.r_[canonical.min(0), 0.0], np.r_[canonical.max(0), 1.0])
    normalizer = Normalizer.from_data(X, Y, x_bounds=bounds)
    traj = scene.observed_trajectories[:, :T]
    m_s = min(cfg.inducing.m_spatial, scene.n)
    init = make_init(variant, traj, canonical, scene.times[:T], m_s, cfg.inducing.m_time,
                     subseed(seed, "init"), time_range=(0.0, float(scene.times[T - 1])))
    gp = SparseGP(init.Z, 9, cfg.kernel, cfg.mean, cfg.noise_variance, normalizer)
    report = fit(gp, X, Y, cfg.optimizer, seed=substream(seed, "gp"))
    return gp, report, init


# -- fit ----------------------------------------------------------------------


def fit_experiment(cfg: ExperimentConfig, seed: int) -> dict[str, tuple[SparseGP, FitReport, InducingInit]]:
    scene = make_scene(cfg, seed)
    return {v: fit_offline(scene, cfg, v, seed) for v in cfg.inducing.variants}


# -- extrapolation ------------------------------------------------------------


def _image_psnr(scene, y_pred, frames, cam: Camera) -> float:
    pred = np.stack([render(scene.primitives, y_pred[:, i], cam).color for i in range(len(frames))])
    ref = np.stack([render(scene.primitives, scene.deformations[:, f], cam).color for f in frames])
    return psnr(pred, ref, 1.0)


def extrapolation_experiment(cfg: ExperimentConfig, seed: int, kind: str, horizon: int,
                             cam: Camera | None = None) -> list[dict]:
    """Hold out the last ``horizon`` frames; compare GP and linear continuation.

    Trajectory PSNR uses the ground-truth bounding-box diagonal as peak;
    image PSNR renders the held-out frames without masking.
    """
    scene = make_scene(cfg, seed, kind=kind, occlusion=None)
    T = scene.frames
    if not 2 <= T - horizon:
        raise ValueError("holdout leaves fewer than 2 training frames")
    train = T - horizon
    held = np.arange(train, T)
    gt = scene.trajectories
    peak = bbox_diagonal(gt)
    canonical = scene.primitives.positions
    cam = cam or Camera()

    gp, _, _ = fit_offline(scene, cfg, "timeseries", seed, train_frames=train)
    y_gp, _ = gp_extrapolation(gp, canonical, scene.times[train:])
    lin = linear_extrapolation(scene.observations[:, :train], horizon)
    rows = []
    for method, y in (("gp", y_gp), ("linear", lin)):
        pred = canonical[:, None] + y[..., :3]
        rows.append({
            "scene": kind,
            "periodic": scene.periodic,
            "horizon": horizon,
            "method": method,
            "seed": seed,
            "psnr": psnr(pred, gt[:, train:], peak),
            "mse": float(np.mean((pred - gt[:, train:]) ** 2)),
            "psnr_image": _image_psnr(scene, _renderable(y, scene.deformations[:, held]), held, cam),
        })
    return rows


def _renderable(y, fallback):
    """Replace rotation parts that are too degenerate to orthonormalize."""
    y = np.array(y, dtype=np.float64, copy=True)
    a1, a2 = y[..., 3:6], y[..., 6:9]
    bad = (np.linalg.norm(a1, axis=-1) < 1e-6) | (np.linalg.norm(np.cross(a1, a2), axis=-1) < 1e-6)
    y[bad, 3:] = fallback[bad, 3:]
    return y


# -- uncertainty --------------------------------------------------------------


def uncertainty_experiment(cfg: ExperimentConfig, seed: int, report: OptimizationReport | None = None) -> dict:
    """AUSE of GP Monte Carlo uncertainty against a uniform random baseline.

    Units are (primitive, frame) centre errors and, for ``map_frames``, pixels.
    """
    scene = make_scene(cfg, seed)
    if report is None:
        report = run(scene, cfg.gpgs_config(), seed=seed)
    gp = report.gp
    canonical = scene.primitives.positions
    N, T = scene.n, scene.frames
    mc_seed = subseed(seed, "mc")
    U = np.stack([mc_uncertainty(gp, canonical, scene.times[f], f, cfg.uncertainty.samples, mc_seed)
                  for f in range(T)], axis=1)
    U_rand = substream(seed, "random-uncertainty").uniform(size=(N, T))
    pred = canonical[:, None] + report.y[..., :3]
    err = ((pred - scene.trajectories) ** 2).sum(-1)
    curves = {
        ("primitive", "gp"): sparsification(err, U),
        ("primitive", "random"): sparsification(err, U_rand),
    }
    size = cfg.uncertainty.image_size
    cam = Camera(width=size, height=size, scale=2.8 / size)
    maps, pix_err, pix_u, pix_r = {}, [], [], []
    y_render = _renderable(report.y, scene.deformations)
    for f in cfg.uncertainty.map_frames:
        if not 0 <= f < T:
            raise ValueError(f"map frame {f} outside the sequence")
        out = render(scene.primitives, y_render[:, f], cam)
        ref = render(scene.primitives, scene.deformations[:, f], cam)
        maps[f] = render_uncertainty(out, U[:, f])
        pix_err.append(((out.color - ref.color) ** 2).sum(-1).ravel())
        pix_u.append(maps[f].ravel())
        pix_r.append(render_uncertainty(out, U_rand[:, f]).ravel())
    if pix_err:
        e = np.concatenate(pix_err)
        curves[("pixel", "gp")] = sparsification(e, np.concatenate(pix_u))
        curves[("pixel", "random")] = sparsification(e, np.concatenate(pix_r))
    return {"scene": scene, "report": report, "U": U, "errors": err, "curves": curves, "maps": maps}


# -- GP-GS A/B ----------------------------------------------------------------


def gpgs_experiment(cfg: ExperimentConfig, seed: int) -> dict:
    """Paired runs with and without guidance on the same scene and seed."""
    scene = make_scene(cfg, seed)
    lam = cfg.gpgs.lambda_gp
    guided = run(scene, cfg.gpgs_config(lambda_gp=lam), seed=seed)
    zero = guided if lam == 0 else run(scene, cfg.gpgs_config(lambda_gp=0.0), seed=seed)
    free = run(scene, cfg.gpgs_config(guidance=False), seed=seed)
    return {
        "scene": scene,
        "runs": {lam: guided, 0.0: zero},
        "free": free,
        "hidden_mse": {lam: hidden_mse(guided.y, scene), 0.0: hidden_mse(zero.y, scene)},
        "identical_to_guidance_free": bool(np.array_equal(zero.y, free.y)),
    }
