"""Primitives, deformations, rotation conversions and synthetic dynamic scenes.

A deformation ``y`` for one primitive at one frame is a 9-vector: an additive
translation of the canonical centre (3) followed by a 6D rotation (6), the
first two columns of the deformed orientation matrix. The 6D part replaces
the canonical orientation rather than composing with it.

Synthetic scenes use frame 0 as the canonical pose, so ``y`` at frame 0 is
(0, 0, 0, first two columns of the canonical rotation).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError, DegenerateRotationError
from .seeding import substream

SCHEMA_VERSION = 1
DEGENERATE_TOL = 1e-8
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


# -- rotations ----------------------------------------------------------------


def rotation6d_to_matrix(r6) -> np.ndarray:
    """Gram-Schmidt map from 6D vectors (..., 6) to rotation matrices (..., 3, 3).

    Columns are ``b1 = a1/|a1|``, ``b2`` the normalized part of ``a2``
    orthogonal to ``b1``, and ``b3 = b1 x b2``.
    """
    r = np.asarray(r6, dtype=np.float64)
    if r.shape[-1] != 6:
        raise ValueError("6D rotations need a trailing dimension of 6")
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    n2 = np.linalg.norm(a2, axis=-1, keepdims=True)
    if np.any(n1 <= DEGENERATE_TOL) or np.any(n2 <= DEGENERATE_TOL):
        raise DegenerateRotationError("degenerate 6D rotation")
    b1 = a1 / n1
    u2 = a2 - (b1 * a2).sum(-1, keepdims=True) * b1
    nu = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(nu <= DEGENERATE_TOL * n2):
        raise DegenerateRotationError("degenerate 6D rotation")
    b2 = u2 / nu
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rotation6d(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrices from (w, x, y, z) quaternions, normalized first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quaternion(R) -> np.ndarray:
    """(w, x, y, z) with w >= 0, via the largest-diagonal branch."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * math.sqrt(1.0 + tr)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[i] = q if q[0] >= 0 else -q
    return out.reshape(R.shape[:-2] + (4,))


def rotation_z(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(theta), np.ones_like(theta)
    return np.stack([c, -s, z, s, c, z, z, z, o], axis=-1).reshape(theta.shape + (3, 3))


def random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return quaternion_to_matrix(q)


# -- primitives and deformation ----------------------------------------------


def deform(position, y):
    """Deformed centre(s) and orientation(s) for deformation vector(s) ``y``."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("deformation must be finite")
    return np.asarray(position, dtype=np.float64) + y[..., :3], rotation6d_to_matrix(y[..., 3:])


def covariance(R, scales) -> np.ndarray:
    """``R diag(s^2) R^T`` for batched rotations (..., 3, 3) and scales (..., 3)."""
    R = np.asarray(R, dtype=np.float64)
    s2 = np.asarray(scales, dtype=np.float64) ** 2
    return (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)


@dataclass
class Primitives:
    """Canonical attributes of N Gaussian primitives."""

    positions: np.ndarray  # (N, 3)
    quaternions: np.ndarray  # (N, 4) w, x, y, z
    scales: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.quaternions = self.quaternions / np.linalg.norm(self.quaternions, axis=1, keepdims=True)
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        self.opacities = np.clip(self.opacities, 0.0, 1.0)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def rotations(self) -> np.ndarray:
        return quaternion_to_matrix(self.quaternions)


# -- synthetic scenes ---------------------------------------------------------


class OcclusionSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    fraction: float = Field(0.25, gt=0, le=1)
    start: int = Field(20, ge=0)
    end: int = Field(40, ge=1)

    @model_validator(mode="after")
    def _window(self):
        if self.end <= self.start:
            raise ValueError("occlusion window must satisfy start < end")
        return self


class SceneSpec(BaseModel):
    """Parameters of a synthetic scene.

    ``frequency`` is the number of windmill revolutions over the sequence;
    ``velocity`` is the slider speed in scene units per unit time.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["windmill", "slider", "mixed"] = "windmill"
    n: int = Field(64, ge=4)
    frames: int = Field(60, ge=8)
    frequency: float = Field(2.0, gt=0)
    velocity: float = 0.6
    noise: float = Field(0.005, ge=0)
    occlusion: OcclusionSpec | None = None
    seed: int = 0

    @model_validator(mode="after")
    def _occlusion_in_range(self):
        if self.occlusion is not None and self.occlusion.end > self.frames:
            raise ValueError("occlusion window exceeds the sequence")
        return self


MOTION_CODES = {"static": 0, "periodic": 1, "linear": 2, "ease": 3}


@dataclass
class SyntheticScene:
    spec: SceneSpec
    primitives: Primitives
    times: np.ndarray  # (T,) in [0, 1]
    deformations: np.ndarray  # (N, T, 9) ground truth y
    observations: np.ndarray  # (N, T, 9) noisy y
    visible: np.ndarray  # (N, T) bool
    motion: np.ndarray  # (N,) codes from MOTION_CODES
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.primitives)

    @property
    def frames(self) -> int:
        return self.times.shape[0]

    @property
    def periodic(self) -> bool:
        return self.spec.kind == "windmill"

    @property
    def trajectories(self) -> np.ndarray:
        """Ground-truth centres (N, T, 3)."""
        return self.primitives.positions[:, None, :] + self.deformations[..., :3]

    @property
    def observed_trajectories(self) -> np.ndarray:
        return self.primitives.positions[:, None, :] + self.observations[..., :3]

    @property
    def motion_period_frames(self) -> float | None:
        return self.spec.frames / self.spec.frequency if self.spec.kind != "slider" else None

    def inputs(self, frames=None, visible_only: bool = True):
        """GP training pairs: X (n, 4) = (canonical p, t), Y (n, 9) = observed y."""
        T = self.frames
        frames = np.arange(T) if frames is None else np.asarray(frames)
        mask = np.zeros((self.n, T), dtype=bool)
        mask[:, frames] = True
        if visible_only:
            mask &= self.visible
        k, f = np.nonzero(mask)
        X = np.column_stack([self.primitives.positions[k], self.times[f]])
        return X, self.observations[k, f]

    def to_dict(self) -> dict:
        p = self.primitives
        return {
            "schema_version": SCHEMA_VERSION,
            "spec": self.spec.model_dump(),
            "primitives": {
                "positions": p.positions.tolist(),
                "quaternions": p.quaternions.tolist(),
                "scales": p.scales.tolist(),
                "opacities": p.opacities.tolist(),
                "colors": p.colors.tolist(),
            },
            "times": self.times.tolist(),
            "deformations": self.deformations.tolist(),
            "observations": self.observations.tolist(),
            "visible": self.visible.astype(int).tolist(),
            "motion": self.motion.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported scene schema version {d.get('schema_version')!r}")
        p = d["primitives"]
        arr = lambda x: np.asarray(x, dtype=np.float64)  # noqa: E731
        prims = Primitives(arr(p["positions"]), arr(p["quaternions"]), arr(p["scales"]),
                           arr(p["opacities"]), arr(p["colors"]))
        # keep stored quaternions exactly (normalization may move the last ulp)
        prims.quaternions = arr(p["quaternions"])
        return cls(SceneSpec(**d["spec"]), prims, arr(d["times"]), arr(d["deformations"]),
                   arr(d["observations"]), np.asarray(d["visible"], dtype=bool),
                   np.asarray(d["motion"], dtype=np.int64), d.get("metadata", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "SyntheticScene":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _windmill(rng, n, T, frequency, center=(0.0, 0.0, 0.0), size=1.0, blades=4):
    """Blade primitives rotating about the z axis plus a static pole."""
    n_pole = max(1, n // 8)
    n_blade = n - n_pole
    b = np.arange(n_blade) % blades
    radius = size * rng.uniform(0.15, 1.0, n_blade)
    across = size * rng.uniform(-0.06, 0.06, n_blade)
    phi = 2 * np.pi * b / blades
    frame = np.arange(T)
    theta = 2 * np.pi * frequency * frame / T  # exact period T / f frames
    ang = phi[:, None] + theta[None, :]
    # blade-local (radius, across) rotated by the blade angle
    c, s = np.cos(ang), np.sin(ang)
    xy = np.stack([radius[:, None] * c - across[:, None] * s, radius[:, None] * s + across[:, None] * c], -1)
    z = size * rng.uniform(-0.02, 0.02, n_blade)
    center = np.asarray(center, dtype=np.float64)
    blade_traj = np.concatenate([xy, np.repeat(z[:, None, None], T, 1)], -1) + center
    R0 = rotation_z(phi + rng.uniform(-0.2, 0.2, n_blade))
    blade_rot = rotation_z(theta)[None] @ R0[:, None]

    pole = np.column_stack([
        size * rng.uniform(-0.04, 0.04, n_pole),
        -size * rng.uniform(0.1, 1.1, n_pole),
        np.full(n_pole, 0.05 * size),
    ]) + center
    pole_traj = np.repeat(pole[:, None], T, 1)
    pole_rot = np.repeat(random_rotations(rng, n_pole)[:, None], T, 1)
    traj = np.concatenate([blade_traj, pole_traj])
    rot = np.concatenate([blade_rot, pole_rot])
    motion = np.concatenate([np.full(n_blade, MOTION_CODES["periodic"]), np.full(n_pole, MOTION_CODES["static"])])
    colors = np.concatenate([np.tile([[0.9, 0.3, 0.2]], (n_blade, 1)), np.tile([[0.4, 0.3, 0.2]], (n_pole, 1))])
    return traj, rot, motion, colors


def _slider(rng, n, times, velocity, center=(0.0, 0.0, 0.0), size=1.0):
    """Half constant-velocity blocks, half ease-in (quadratic) blocks."""
    n_lin = n // 2
    start = np.asarray(center) + size * np.column_stack([
        rng.uniform(-1.0, 0.0, n), rng.uniform(-0.8, 0.8, n), rng.uniform(-0.1, 0.1, n)
    ])
    direction = np.zeros((n, 3))
    direction[:, 0] = 1.0
    direction[:, 1] = rng.uniform(-0.3, 0.3, n)
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    v = velocity * size * direction
    t = times[None, :, None]
    disp = np.where(np.arange(n)[:, None, None] < n_lin, v[:, None] * t, v[:, None] * t * t)
    traj = start[:, None] + disp
    rot = np.repeat(random_rotations(rng, n)[:, None], len(times), 1)
    motion = np.where(np.arange(n) < n_lin, MOTION_CODES["linear"], MOTION_CODES["ease"])
    colors = np.tile([[0.2, 0.5, 0.9]], (n, 1))
    return traj, rot, motion, colors


def _background(rng, n, T):
    pos = np.column_stack([rng.uniform(-1.2, 1.2, n), rng.uniform(-1.2, 1.2, n), np.full(n, -0.4)])
    rot = np.repeat(random_rotations(rng, n)[:, None], T, 1)
    return np.repeat(pos[:, None], T, 1), rot, np.full(n, MOTION_CODES["static"]), np.tile([[0.5, 0.5, 0.5]], (n, 1))


def _occlusion_mask(rng, spec: SceneSpec, motion: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, T = spec.n, spec.frames
    visible = np.ones((n, T), dtype=bool)
    occ = spec.occlusion
    if occ is None:
        return visible, np.zeros(0, dtype=np.int64)
    count = math.ceil(occ.fraction * n - 1e-9)
    moving = np.flatnonzero(motion != MOTION_CODES["static"])
    # prefer hiding moving primitives; static ones carry no motion to recover
    pool = moving if moving.size >= count else np.arange(n)
    hidden = np.sort(rng.choice(pool, size=count, replace=False))
    visible[np.ix_(hidden, np.arange(occ.start, occ.end))] = False
    return visible, hidden


def generate_scene(spec: SceneSpec | dict | None = None, **overrides) -> SyntheticScene:
    """Build a synthetic scene; deterministic given the SceneSpec, seed included."""
    try:
        if spec is None:
            spec = SceneSpec(**overrides)
        elif isinstance(spec, dict):
            spec = SceneSpec(**{**spec, **overrides})
        elif overrides:
            spec = spec.model_copy(update=overrides)
            spec = SceneSpec(**spec.model_dump())
    except ValidationError as e:
        raise ConfigError(f"invalid scene spec: {e}") from e
    rng = substream(spec.seed, "scene")
    n, T = spec.n, spec.frames
    times = np.arange(T) / (T - 1)
    if spec.kind == "windmill":
        parts = [_windmill(rng, n, T, spec.frequency)]
    elif spec.kind == "slider":
        parts = [_slider(rng, n, times, spec.velocity)]
    else:
        n_w = max(2, round(0.4 * n))
        n_s = max(1, round(0.3 * n))
        n_b = n - n_w - n_s
        parts = [
            _windmill(rng, n_w, T, spec.frequency, center=(-0.6, 0.1, 0.0), size=0.5),
            _slider(rng, n_s, times, spec.velocity, center=(0.5, 0.0, 0.1), size=0.5),
        ]
        if n_b > 0:
            parts.append(_background(rng, n_b, T))
    traj = np.concatenate([p[0] for p in parts])
    rot = np.concatenate([p[1] for p in parts])
    motion = np.concatenate([p[2] for p in parts]).astype(np.int64)
    colors = np.concatenate([p[3] for p in parts])
    colors = np.clip(colors + rng.uniform(-0.08, 0.08, colors.shape), 0.0, 1.0)

    canonical = traj[:, 0].copy()
    prims = Primitives(
        positions=canonical,
        quaternions=matrix_to_quaternion(rot[:, 0]),
        scales=rng.uniform(0.03, 0.07, (n, 3)),
        opacities=rng.uniform(0.6, 0.95, n),
        colors=colors,
    )
    gt = np.concatenate([traj - canonical[:, None], matrix_to_rotation6d(rot)], axis=-1)
    observations = gt + rng.normal(0.0, spec.noise, gt.shape) if spec.noise > 0 else gt.copy()
    visible, hidden = _occlusion_mask(rng, spec, motion)
    meta = {"hidden": hidden.tolist()}
    return SyntheticScene(spec, prims, times, gt, observations, visible, motion, meta)


# -- Monte Carlo uncertainty --------------------------------------------------


def mc_uncertainty_from_moments(mean, var, samples: int, rng: np.random.Generator) -> float:
    """Trace of the sample covariance of deformed centres.

    Samples ``y ~ N(mean, diag var)``; the deformed centre is the canonical
    centre plus the translation part, so rotation components do not move it.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.sqrt(np.clip(np.asarray(var, dtype=np.float64), 0.0, None))
    eps = rng.standard_normal((samples, mean.shape[-1]))
    # covariance is shift invariant; working with offsets keeps U = 0 exact
    offsets = eps[:, :3] * sd[:3]
    return float(offsets.var(axis=0, ddof=1).sum())


def mc_uncertainty(gp, canonical, t: float, frame: int, samples: int = 32, seed: int = 0) -> np.ndarray:
    """U_{k,t} for every primitive at one time, shape (N,).

    Each primitive uses its own random stream keyed by (seed, k, frame).
    """
    canonical = np.asarray(canonical, dtype=np.float64).reshape(-1, 3)
    X = np.column_stack([canonical, np.full(canonical.shape[0], float(t))])
    mean, var = gp.predict(X)
    out = np.empty(canonical.shape[0])
    for k in range(canonical.shape[0]):
        out[k] = mc_uncertainty_from_moments(mean[k], var[k], samples, substream(seed, "mc", k, frame))
    return out
