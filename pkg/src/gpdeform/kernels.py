"""Covariance and mean functions over spatio-temporal inputs ``(px, py, pz, t)``.

The composite kernel for one output head is

    k(x, x') = k_spatial(p, p') + sum_j k_matern_j(p_j, p'_j) * k_periodic_j(t, t')

with an anisotropic Matérn spatial term and, per spatial axis, a 1D Matérn
weighted by a periodic kernel in time. All learnable quantities are stored
as unconstrained reals and mapped through softplus (periods through a scaled
sigmoid so they stay inside ``(0, max_period]``).

Kernels are evaluated for several output heads at once: parameters carry a
leading head axis and ``kernel(X1, X2)`` returns an ``(H, N1, N2)`` tensor.
"""

from __future__ import annotations

import math
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from torch import nn

DTYPE = torch.float64
NU_VALUES = (0.5, 1.5, 2.5)
MAX_PERIOD = 4.0  # normalized time range is [0, 1]
AXES = ("x", "y", "z")

_SQRT_2NU = {0.5: 1.0, 1.5: math.sqrt(3.0), 2.5: math.sqrt(5.0)}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SpatialMaternParams(_Strict):
    variance: float = Field(1.0, gt=0)
    lengthscales: tuple[float, float, float] = (0.3, 0.3, 0.3)
    nu: float = 1.5

    @field_validator("lengthscales")
    @classmethod
    def _positive(cls, v):
        if any(not (x > 0) for x in v):
            raise ValueError("lengthscales must be positive")
        return v

    @field_validator("nu")
    @classmethod
    def _half_integer(cls, v):
        if v not in NU_VALUES:
            raise ValueError(f"nu must be one of {NU_VALUES}, got {v}")
        return v


class MaternParams(_Strict):
    variance: float = Field(1.0, gt=0)
    lengthscale: float = Field(0.3, gt=0)


class PeriodicParams(_Strict):
    variance: float = Field(1.0, gt=0)
    lengthscale: float = Field(1.0, gt=0)
    period: float = Field(0.5, gt=0, le=MAX_PERIOD)


class AxisTemporalParams(_Strict):
    matern: MaternParams = MaternParams()
    periodic: PeriodicParams = PeriodicParams()


class KernelConfig(_Strict):
    """Hyperparameter initialization for :class:`CompositeKernel`.

    ``variant`` selects the covariance structure:

    * ``composite`` - spatial Matérn plus per-axis Matérn x periodic terms.
    * ``joint-matern`` - one ARD Matérn over all four input dimensions with no
      spatial/temporal split (uses ``spatial`` and ``time_lengthscale``).
    * ``rbf-spatial`` - composite, with the spatial Matérn replaced by an RBF.
    """

    variant: Literal["composite", "joint-matern", "rbf-spatial"] = "composite"
    spatial: SpatialMaternParams = SpatialMaternParams()
    temporal: dict[Literal["x", "y", "z"], AxisTemporalParams] = Field(
        default_factory=lambda: {a: AxisTemporalParams() for a in AXES}
    )
    time_lengthscale: float = Field(0.3, gt=0)
    share_heads: bool = False

    @field_validator("temporal")
    @classmethod
    def _all_axes(cls, v):
        missing = [a for a in AXES if a not in v]
        if missing:
            raise ValueError(f"temporal block missing axes {missing}")
        return v


class MeanConfig(_Strict):
    """``m(x) = c`` or ``m(x) = c + A sin(2 pi t / T + phi)``."""

    variant: Literal["constant", "periodic"] = "constant"
    c: float = 0.0
    A: float = 0.0
    T: float = 1.0
    phi: float = 0.0

    @model_validator(mode="after")
    def _period(self):
        if self.variant == "periodic" and not self.T > 0:
            raise ValueError("invalid period")
        return self


# -- parameter transforms -----------------------------------------------------


def inv_softplus(y):
    """Inverse of softplus for positive inputs (numpy or float)."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _raw(value, heads: int, shape=()) -> nn.Parameter:
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (heads, *shape)).copy()
    return nn.Parameter(torch.as_tensor(arr, dtype=DTYPE))


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


# -- elementary kernels -------------------------------------------------------


def _matern_parts(d: torch.Tensor, nu: float):
    """Split Matérn(nu) at scaled distance ``d`` into ``poly(a) * exp(-a)``."""
    a = _SQRT_2NU[nu] * d
    if nu == 0.5:
        poly = torch.ones_like(a)
    elif nu == 1.5:
        poly = 1.0 + a
    else:
        poly = 1.0 + a + a * a / 3.0
    return poly, a


def matern(d: torch.Tensor, nu: float) -> torch.Tensor:
    """Unit-variance half-integer Matérn correlation at scaled distance d = r/l."""
    poly, a = _matern_parts(d, nu)
    return poly * torch.exp(-a)


def _safe_norm(sq: torch.Tensor) -> torch.Tensor:
    # zero gradient at coincident points instead of NaN
    return torch.sqrt(torch.clamp(sq, min=1e-36))


class CompositeKernel(nn.Module):
    """Head-batched spatio-temporal kernel; see module docstring."""

    def __init__(self, config: KernelConfig | None = None, num_heads: int = 1):
        super().__init__()
        config = config or KernelConfig()
        self.config = config
        self.variant = config.variant
        self.nu = config.spatial.nu
        self.num_heads = num_heads
        hp = 1 if config.share_heads else num_heads
        sp = config.spatial
        tmp = [config.temporal[a] for a in AXES]
        self.raw_spatial_variance = _raw(inv_softplus(sp.variance), hp)
        self.raw_spatial_lengthscales = _raw(inv_softplus(sp.lengthscales), hp, (3,))
        if self.variant == "joint-matern":
            self.raw_time_lengthscale = _raw(inv_softplus(config.time_lengthscale), hp)
        else:
            self.raw_matern_variance = _raw(inv_softplus([t.matern.variance for t in tmp]), hp, (3,))
            self.raw_matern_lengthscale = _raw(inv_softplus([t.matern.lengthscale for t in tmp]), hp, (3,))
            self.raw_periodic_variance = _raw(inv_softplus([t.periodic.variance for t in tmp]), hp, (3,))
            self.raw_periodic_lengthscale = _raw(inv_softplus([t.periodic.lengthscale for t in tmp]), hp, (3,))
            self.raw_period = _raw(_logit([t.periodic.period / MAX_PERIOD for t in tmp]), hp, (3,))

    # constrained views
    @property
    def spatial_variance(self):
        return F.softplus(self.raw_spatial_variance)

    @property
    def spatial_lengthscales(self):
        return F.softplus(self.raw_spatial_lengthscales)

    @property
    def time_lengthscale(self):
        return F.softplus(self.raw_time_lengthscale)

    @property
    def matern_variance(self):
        return F.softplus(self.raw_matern_variance)

    @property
    def matern_lengthscale(self):
        return F.softplus(self.raw_matern_lengthscale)

    @property
    def periodic_variance(self):
        return F.softplus(self.raw_periodic_variance)

    @property
    def periodic_lengthscale(self):
        return F.softplus(self.raw_periodic_lengthscale)

    @property
    def period(self):
        return MAX_PERIOD * torch.sigmoid(self.raw_period)

    def _expand(self, t: torch.Tensor) -> torch.Tensor:
        if t.shape[0] == self.num_heads:
            return t
        return t.expand(self.num_heads, *t.shape[1:])

    def total_variance(self) -> torch.Tensor:
        """k(x, x) per head, shape (H,)."""
        v = self.spatial_variance
        if self.variant != "joint-matern":
            v = v + (self.matern_variance * self.periodic_variance).sum(-1)
        return self._expand(v)

    def diag(self, X: torch.Tensor) -> torch.Tensor:
        return self.total_variance()[:, None].expand(self.num_heads, X.shape[0])

    def spatial(self, X1: torch.Tensor, X2: torch.Tensor) -> torch.Tensor:
        """Spatial term alone, (H, N1, N2)."""
        ls = self.spatial_lengthscales
        diff = (X1[None, :, None, :3] - X2[None, None, :, :3]) / ls[:, None, None, :]
        sq = (diff * diff).sum(-1)
        var = self.spatial_variance[:, None, None]
        if self.variant == "rbf-spatial":
            return self._expand(var * torch.exp(-0.5 * sq))
        return self._expand(var * matern(_safe_norm(sq), self.nu))

    def forward(self, X1: torch.Tensor, X2: torch.Tensor) -> torch.Tensor:
        if self.variant == "joint-matern":
            ls = torch.cat([self.spatial_lengthscales, self.time_lengthscale[:, None]], dim=-1)
            diff = (X1[None, :, None, :] - X2[None, None, :, :]) / ls[:, None, None, :]
            r = _safe_norm((diff * diff).sum(-1))
            return self._expand(self.spatial_variance[:, None, None] * matern(r, self.nu))

        k = self.spatial(X1, X2)
        dt = X1[:, None, 3] - X2[None, :, 3]
        mv, ml = self.matern_variance, self.matern_lengthscale
        pv, pl, tau = self.periodic_variance, self.periodic_lengthscale, self.period
        for j in range(3):
            dj = torch.abs(X1[:, None, j] - X2[None, :, j])
            poly, a = _matern_parts(dj[None] / ml[:, j, None, None], self.nu)
            s = torch.sin(math.pi * dt[None] / tau[:, j, None, None])
            expo = a + 2.0 * s * s / pl[:, j, None, None] ** 2
            k = k + (mv[:, j] * pv[:, j])[:, None, None] * poly * torch.exp(-expo)
        return k

    def periodic_factor(self, t1: torch.Tensor, t2: torch.Tensor, axis: int = 0) -> torch.Tensor:
        """Periodic kernel of one axis, (H, N1, N2)."""
        dt = t1[:, None] - t2[None, :]
        s = torch.sin(math.pi * dt[None] / self.period[:, axis, None, None])
        out = self.periodic_variance[:, axis, None, None] * torch.exp(
            -2.0 * s * s / self.periodic_lengthscale[:, axis, None, None] ** 2
        )
        return self._expand(out)

    def describe(self) -> dict:
        """Constrained hyperparameters of head 0 as plain floats."""
        with torch.no_grad():
            d = {
                "variant": self.variant,
                "spatial_variance": float(self.spatial_variance[0]),
                "spatial_lengthscales": self.spatial_lengthscales[0].tolist(),
            }
            if self.variant == "joint-matern":
                d["time_lengthscale"] = float(self.time_lengthscale[0])
            else:
                d["period"] = self.period[0].tolist()
                d["periodic_lengthscale"] = self.periodic_lengthscale[0].tolist()
                d["matern_lengthscale"] = self.matern_lengthscale[0].tolist()
        return d


class MeanFunction(nn.Module):
    """Head-batched constant or periodic-in-time mean; returns (H, N)."""

    def __init__(self, config: MeanConfig | None = None, num_heads: int = 1, share_heads: bool = False):
        super().__init__()
        config = config or MeanConfig()
        self.variant = config.variant
        self.num_heads = num_heads
        hp = 1 if share_heads else num_heads
        self.c = _raw(config.c, hp)
        if self.variant == "periodic":
            self.amplitude = _raw(config.A, hp)
            self.raw_period = _raw(inv_softplus(config.T), hp)
            self.phase = _raw(config.phi, hp)

    @property
    def period(self):
        return F.softplus(self.raw_period)

    def forward(self, X: torch.Tensor) -> torch.Tensor:
        n = X.shape[0]
        out = self.c[:, None].expand(-1, n)
        if self.variant == "periodic":
            t = X[:, -1]
            arg = 2.0 * math.pi * t[None, :] / self.period[:, None] + self.phase[:, None]
            out = out + self.amplitude[:, None] * torch.sin(arg)
        if out.shape[0] != self.num_heads:
            out = out.expand(self.num_heads, n)
        return out


# 1D kernels used by exact-GP comparisons (step-function fits, periodic oracles).


class Stationary1D(nn.Module):
    """Base for 1D stationary kernels on inputs of shape (N, 1) or (N,)."""

    def __init__(self, variance: float = 1.0, lengthscale: float = 1.0):
        super().__init__()
        self.raw_variance = nn.Parameter(torch.tensor(float(inv_softplus(variance)), dtype=DTYPE))
        self.raw_lengthscale = nn.Parameter(torch.tensor(float(inv_softplus(lengthscale)), dtype=DTYPE))

    @property
    def variance(self):
        return F.softplus(self.raw_variance)

    @property
    def lengthscale(self):
        return F.softplus(self.raw_lengthscale)

    @staticmethod
    def _col(X):
        return X[:, -1] if X.ndim == 2 else X

    def diag(self, X):
        return self.variance.expand(X.shape[0])

    def forward(self, X1, X2):
        d = self._col(X1)[:, None] - self._col(X2)[None, :]
        return self.variance * self.correlation(d)


class RBF1D(Stationary1D):
    def correlation(self, d):
        return torch.exp(-0.5 * (d / self.lengthscale) ** 2)


class Matern1D(Stationary1D):
    def __init__(self, nu: float = 1.5, variance: float = 1.0, lengthscale: float = 1.0):
        if nu not in NU_VALUES:
            raise ValueError(f"nu must be one of {NU_VALUES}")
        super().__init__(variance, lengthscale)
        self.nu = nu

    def correlation(self, d):
        return matern(_safe_norm(d * d) / self.lengthscale, self.nu)


class Periodic1D(Stationary1D):
    def __init__(self, variance: float = 1.0, lengthscale: float = 1.0, period: float = 1.0):
        super().__init__(variance, lengthscale)
        self.raw_period = nn.Parameter(torch.tensor(float(inv_softplus(period)), dtype=DTYPE))

    @property
    def period(self):
        return F.softplus(self.raw_period)

    def correlation(self, d):
        s = torch.sin(math.pi * d / self.period)
        return torch.exp(-2.0 * s * s / self.lengthscale**2)


# -- functional API -----------------------------------------------------------


def _check_points(X) -> torch.Tensor:
    X = as_tensor(X)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise ValueError("empty gram")
    if not torch.isfinite(X).all():
        raise ValueError("invalid input")
    return X


def _as_kernel(k) -> nn.Module:
    if isinstance(k, KernelConfig):
        return CompositeKernel(k, 1)
    return k


def eval_kernel(k: CompositeKernel | KernelConfig, x, x2, head: int = 0) -> float:
    """Kernel value for a single pair of 4D inputs."""
    k = _as_kernel(k)
    a, b = _check_points(x), _check_points(x2)
    with torch.no_grad():
        return float(k(a, b)[head, 0, 0])


def gram_matrix(k, X, X2=None, jitter: float = 0.0, head: int | None = 0) -> np.ndarray:
    """Pairwise kernel matrix.

    ``jitter`` is added to the diagonal only in the square case (``X2`` omitted
    or the very same object as ``X``). With ``head=None`` all heads are
    returned as an (H, N, M) array.
    """
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    k = _as_kernel(k)
    square = X2 is None or X2 is X
    A = _check_points(X)
    B = A if square else _check_points(X2)
    with torch.no_grad():
        K = k(A, B)
        if K.ndim == 2:
            K = K[None]
        if square and jitter > 0:
            K = K + jitter * torch.eye(A.shape[0], dtype=DTYPE)
    K = K.numpy()
    return K if head is None else K[head]


def eval_mean(m: MeanFunction | MeanConfig, x, head: int = 0) -> float:
    if isinstance(m, MeanConfig):
        m = MeanFunction(m, 1)
    X = as_tensor(x)
    if X.ndim == 1:
        X = X[None, :]
    with torch.no_grad():
        return float(m(X)[head, 0])


def eval_rbf(variance: float, lengthscale: float, x: float, x2: float) -> float:
    if not (variance > 0 and lengthscale > 0):
        raise ValueError("variance and lengthscale must be positive")
    d = float(x) - float(x2)
    return variance * math.exp(-0.5 * d * d / (lengthscale * lengthscale))


def eval_matern_1d(variance: float, lengthscale: float, nu: float, x: float, x2: float) -> float:
    if nu not in NU_VALUES:
        raise ValueError(f"nu must be one of {NU_VALUES}")
    d = torch.tensor(abs(float(x) - float(x2)) / lengthscale, dtype=DTYPE)
    return variance * float(matern(d, nu))
