"""Multi-output sparse variational Gaussian processes.

Each of ``d`` output heads is an independent GP ``f_i ~ GP(m_i, k_i)`` sharing
one set of inducing inputs ``Z``. The variational posterior over inducing
values is ``q(u_i) = N(m_i, L_i L_i^T)`` with the prior ``p(u_i) = N(0, K_ZZ)``
placed on the residual process ``f_i - m_i``. The bound

    ELBO = sum_i [ (N/B) sum_n E_q log N(y_ni | f_i(x_n), s2_i) - KL(q(u_i) || p(u_i)) ]

is evaluated in closed form and differentiated with torch autograd.

:class:`ExactGP` implements the dense conditioning formulas and serves as
the reference for the sparse model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from .errors import DivergenceError, IllConditionedError
from .kernels import (
    DTYPE,
    CompositeKernel,
    KernelConfig,
    MeanConfig,
    MeanFunction,
    as_tensor,
    inv_softplus,
)

JITTER_LADDER = (1e-6, 1e-4, 1e-3)
LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_FORMAT = "gpdeform.svgp"
CHECKPOINT_VERSION = 1


def stable_cholesky(K: torch.Tensor, jitter: float = 1e-6, message: str = "ill-conditioned") -> torch.Tensor:
    """Cholesky factor of ``K + jitter*I``, escalating jitter along the ladder."""
    eye = torch.eye(K.shape[-1], dtype=K.dtype)
    ladder = [jitter] + [j for j in JITTER_LADDER if j > jitter]
    for j in ladder:
        L, info = torch.linalg.cholesky_ex(K + j * eye if j > 0 else K)
        if not bool((info != 0).any()) and bool(torch.isfinite(L).all()):
            return L
    raise IllConditionedError(message)


def _tri_solve(L, B, upper=False, left=True):
    return torch.linalg.solve_triangular(L, B, upper=upper, left=left)


# -- normalization ------------------------------------------------------------


@dataclass
class Normalizer:
    """Affine maps between raw and normalized inputs/outputs.

    Inputs: ``xn = (x - x_offset) / x_scale``. Outputs: ``yn = (y - y_mean) / y_std``.
    """

    x_offset: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def identity(cls, input_dim: int, output_dim: int) -> "Normalizer":
        return cls(np.zeros(input_dim), np.ones(input_dim), np.zeros(output_dim), np.ones(output_dim))

    @classmethod
    def from_data(cls, X, Y, x_bounds=None, shared_spatial: bool = True) -> "Normalizer":
        """Fit the maps to data.

        Spatial columns share one scale (the largest extent) so canonical
        geometry is not distorted; the time column is scaled on its own.
        ``x_bounds`` (lo, hi) overrides the data range, which keeps time units
        fixed when training on a prefix of a sequence.
        """
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if x_bounds is None:
            lo, hi = X.min(0), X.max(0)
        else:
            lo, hi = (np.asarray(b, dtype=np.float64) for b in x_bounds)
        ext = np.where(hi - lo > 1e-12, hi - lo, 1.0)
        if shared_spatial and X.shape[1] == 4:
            s = ext[:3].max()
            ext = np.array([s, s, s, ext[3]])
        std = Y.std(0)
        std = np.where(std > 1e-8, std, 1.0)
        return cls(lo.copy(), ext, Y.mean(0), std)

    def x_forward(self, X) -> torch.Tensor:
        return (as_tensor(X) - as_tensor(self.x_offset)) / as_tensor(self.x_scale)

    def y_forward(self, Y) -> torch.Tensor:
        return (as_tensor(Y) - as_tensor(self.y_mean)) / as_tensor(self.y_std)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("x_offset", "x_scale", "y_mean", "y_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("x_offset", "x_scale", "y_mean", "y_std")))


# -- exact GP -----------------------------------------------------------------


class ExactGP(nn.Module):
    """Single-output GP regression with dense conditioning."""

    def __init__(self, kernel: nn.Module, mean: nn.Module | None = None, noise_variance: float = 1e-2,
                 X=None, y=None, jitter: float = 0.0):
        super().__init__()
        self.kernel = kernel
        self.mean = mean
        self.raw_noise = nn.Parameter(torch.tensor(float(inv_softplus(noise_variance)), dtype=DTYPE))
        self.jitter = jitter
        if X is None:
            self.X = torch.zeros((0, 1), dtype=DTYPE)
            self.y = torch.zeros(0, dtype=DTYPE)
        else:
            X = as_tensor(X)
            self.X = X[:, None] if X.ndim == 1 else X
            self.y = as_tensor(y).reshape(-1)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y lengths differ")

    @property
    def noise_variance(self):
        return F.softplus(self.raw_noise)

    def _k(self, A, B):
        K = self.kernel(A, B)
        return K[0] if K.ndim == 3 else K

    def _kdiag(self, A):
        d = self.kernel.diag(A)
        return d[0] if d.ndim == 2 else d

    def _m(self, X):
        if self.mean is None:
            return torch.zeros(X.shape[0], dtype=DTYPE)
        m = self.mean(X)
        return m[0] if m.ndim == 2 else m

    def _factor(self):
        K = self._k(self.X, self.X) + self.noise_variance * torch.eye(self.X.shape[0], dtype=DTYPE)
        return stable_cholesky(K, self.jitter, "ill-conditioned")

    def posterior(self, Xs, grad: bool = False):
        """Predictive mean and latent variance at ``Xs`` as numpy arrays."""
        Xs = as_tensor(Xs)
        if Xs.ndim == 1:
            Xs = Xs[:, None] if self.X.shape[1] == 1 else Xs[None, :]
        with torch.set_grad_enabled(grad):
            mean = self._m(Xs)
            var = self._kdiag(Xs)
            if self.X.shape[0] > 0:
                L = self._factor()
                ks = self._k(self.X, Xs)
                resid = (self.y - self._m(self.X))[:, None]
                alpha = torch.cholesky_solve(resid, L)
                mean = mean + (ks * alpha).sum(0)
                v = _tri_solve(L, ks)
                var = var - (v * v).sum(0)
            var = torch.clamp(var, min=0.0)
        return mean.detach().numpy(), var.detach().numpy()

    def log_marginal_likelihood(self) -> torch.Tensor:
        n = self.X.shape[0]
        if n == 0:
            return torch.zeros((), dtype=DTYPE)
        L = self._factor()
        r = (self.y - self._m(self.X))[:, None]
        a = _tri_solve(L, r)
        return -0.5 * (a * a).sum() - torch.log(torch.diagonal(L)).sum() - 0.5 * n * LOG_2PI

    def optimize(self, iterations: int = 200, lr: float = 0.05) -> list[float]:
        """Maximize the log marginal likelihood with Adam; returns the trace."""
        opt = torch.optim.Adam([p for p in self.parameters() if p.requires_grad], lr=lr)
        trace = []
        for _ in range(iterations):
            opt.zero_grad()
            loss = -self.log_marginal_likelihood()
            if not torch.isfinite(loss):
                raise DivergenceError("diverged", len(trace))
            loss.backward()
            opt.step()
            trace.append(-float(loss.detach()))
        return trace


def exact_posterior(gp: ExactGP, x):
    """(mean, variance) at one query point, or arrays for several."""
    m, v = gp.posterior(x)
    if m.shape == (1,):
        return float(m[0]), float(v[0])
    return m, v


# -- sparse variational GP ----------------------------------------------------

PARAM_GROUPS = ("variational", "inducing", "kernel", "mean", "noise")


@dataclass
class PosteriorFactors:
    """Per-call cache of the O(M^3) work needed for prediction."""

    alpha: torch.Tensor  # (H, M)   K_ZZ^-1 m
    sigma: torch.Tensor  # (H, M, M) K^-1 - K^-1 S K^-1


class SparseGP(nn.Module):
    """Multi-head SVGP with shared inducing inputs.

    Parameters
    ----------
    Z : array (M, D)
        Inducing inputs in raw (un-normalized) units.
    num_heads : int
        Number of independent output dimensions.
    normalizer : Normalizer, optional
        Raw/normalized maps. Identity when omitted; all internal computation
        (ELBO, kernel hyperparameters, ``Z``) lives in normalized units.
    """

    def __init__(self, Z, num_heads: int = 9, kernel: KernelConfig | None = None,
                 mean: MeanConfig | None = None, noise_variance: float = 1e-2,
                 normalizer: Normalizer | None = None, jitter: float = 1e-6):
        super().__init__()
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[0] < 1:
            raise ValueError("Z must be a non-empty (M, D) array")
        self.kernel_config = kernel or KernelConfig()
        self.mean_config = mean or MeanConfig()
        self.num_heads = num_heads
        self.jitter = jitter
        self.normalizer = normalizer or Normalizer.identity(Z.shape[1], num_heads)
        M = Z.shape[0]
        self.Z = nn.Parameter(self.normalizer.x_forward(Z).clone())
        self.kernel = CompositeKernel(self.kernel_config, num_heads)
        self.mean = MeanFunction(self.mean_config, num_heads, self.kernel_config.share_heads)
        self.q_mu = nn.Parameter(torch.zeros(num_heads, M, dtype=DTYPE))
        self.q_sqrt_raw = nn.Parameter(torch.zeros(num_heads, M, M, dtype=DTYPE))
        self.raw_noise = nn.Parameter(torch.full((num_heads,), float(inv_softplus(noise_variance)), dtype=DTYPE))
        self.set_variational_to_prior()

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    @property
    def noise_variance(self) -> torch.Tensor:
        return F.softplus(self.raw_noise)

    def q_sqrt(self) -> torch.Tensor:
        raw = self.q_sqrt_raw
        diag = F.softplus(torch.diagonal(raw, dim1=-2, dim2=-1))
        return torch.tril(raw, diagonal=-1) + torch.diag_embed(diag)

    def _set_q_sqrt(self, L: torch.Tensor):
        raw = torch.tril(L, diagonal=-1)
        d = torch.diagonal(L, dim1=-2, dim2=-1).clamp(min=1e-12)
        raw = raw + torch.diag_embed(as_tensor(inv_softplus(d.numpy())))
        self.q_sqrt_raw.data.copy_(raw)

    def _kzz_chol(self) -> torch.Tensor:
        Kzz = self.kernel(self.Z, self.Z)
        return stable_cholesky(Kzz, self.jitter, "ill-conditioned inducing set")

    @torch.no_grad()
    def set_variational_to_prior(self):
        """q(u) = p(u): zero mean, S = K_ZZ (so the KL term vanishes)."""
        self.q_mu.zero_()
        self._set_q_sqrt(self._kzz_chol())

    @torch.no_grad()
    def set_variational_optimal(self, X, Y):
        """Closed-form optimal q(u) for the current hyperparameters and Z."""
        Xn, Yn = self.normalizer.x_forward(X), self.normalizer.y_forward(Y).T
        Lk = self._kzz_chol()
        Kzz = Lk @ Lk.transpose(-1, -2)
        Kzx = self.kernel(self.Z, Xn)
        s2 = self.noise_variance[:, None, None]
        A = Kzz + Kzx @ Kzx.transpose(-1, -2) / s2
        La = stable_cholesky(A, 0.0, "ill-conditioned inducing set")
        B = _tri_solve(La, Kzz)  # La^-1 Kzz
        S = B.transpose(-1, -2) @ B
        r = (Yn - self.mean(Xn))[..., None]
        m = Kzz @ torch.cholesky_solve(Kzx @ r, La) / s2
        self.q_mu.copy_(m[..., 0])
        self._set_q_sqrt(stable_cholesky(S, self.jitter, "ill-conditioned inducing set"))

    # -- objective ------------------------------------------------------------

    def _elbo_terms(self, Xn: torch.Tensor, Yn: torch.Tensor):
        """Expected log-likelihood sums (H,) and KL terms (H,) in normalized units."""
        Lk = self._kzz_chol()
        Kzx = self.kernel(self.Z, Xn)
        A = _tri_solve(Lk, Kzx)  # (H, M, B)
        Lq = self.q_sqrt()
        a_m = _tri_solve(Lk, self.q_mu[..., None])  # (H, M, 1)
        mu = self.mean(Xn) + (A * a_m).sum(1)
        W = _tri_solve(Lk.transpose(-1, -2), A, upper=True)  # K^-1 Kzx
        LqW = Lq.transpose(-1, -2) @ W
        var = self.kernel.diag(Xn) - (A * A).sum(1) + (LqW * LqW).sum(1)
        s2 = self.noise_variance[:, None]
        resid = Yn.T - mu
        ell = (-0.5 * LOG_2PI - 0.5 * torch.log(s2) - 0.5 * (resid * resid + var) / s2).sum(1)
        LkinvLq = _tri_solve(Lk, Lq)
        M = self.num_inducing
        kl = 0.5 * (
            (LkinvLq * LkinvLq).sum((-1, -2))
            + (a_m * a_m).sum((-1, -2))
            - M
            + 2.0 * torch.log(torch.diagonal(Lk, dim1=-2, dim2=-1)).sum(-1)
            - 2.0 * torch.log(torch.diagonal(Lq, dim1=-2, dim2=-1)).sum(-1)
        )
        return ell, kl

    def kl_divergence(self) -> torch.Tensor:
        empty = torch.zeros((0, self.Z.shape[1]), dtype=DTYPE)
        return self._elbo_terms(empty, torch.zeros((0, self.num_heads), dtype=DTYPE))[1]

    def elbo(self, X, Y, total_n: int | None = None, normalized: bool = False) -> torch.Tensor:
        """Differentiable ELBO (summed over heads) for a batch of raw data."""
        Xn = as_tensor(X) if normalized else self.normalizer.x_forward(X)
        Yn = as_tensor(Y) if normalized else self.normalizer.y_forward(Y)
        B = Xn.shape[0]
        total_n = B if total_n is None else total_n
        if total_n < B:
            raise ValueError("total_n must be at least the batch size")
        ell, kl = self._elbo_terms(Xn, Yn)
        return (total_n / B) * ell.sum() - kl.sum()

    # -- prediction -----------------------------------------------------------

    @torch.no_grad()
    def posterior_factors(self) -> PosteriorFactors:
        Lk = self._kzz_chol()
        Lq = self.q_sqrt()
        alpha = torch.cholesky_solve(self.q_mu[..., None], Lk)[..., 0]
        Kinv = torch.cholesky_inverse(Lk)
        KinvLq = Kinv @ Lq
        sigma = Kinv - KinvLq @ KinvLq.transpose(-1, -2)
        return PosteriorFactors(alpha, sigma)

    @torch.no_grad()
    def predict_normalized(self, Xn: torch.Tensor, factors: PosteriorFactors | None = None,
                           clamp: bool = True):
        f = factors or self.posterior_factors()
        Kxz = self.kernel(Xn, self.Z)  # (H, n, M)
        mean = self.mean(Xn) + (Kxz @ f.alpha[..., None])[..., 0]
        var = self.kernel.diag(Xn) - ((Kxz @ f.sigma) * Kxz).sum(-1)
        if clamp:
            var = torch.clamp(var, min=0.0)
        return mean.T, var.T

    @torch.no_grad()
    def predict(self, X, factors: PosteriorFactors | None = None, chunk: int = 4096,
                clamp: bool = True):
        """Predictive mean and latent variance, each (n, d), in raw units."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        f = factors or self.posterior_factors()
        means, variances = [], []
        for s in range(0, X.shape[0], chunk):
            m, v = self.predict_normalized(self.normalizer.x_forward(X[s:s + chunk]), f, clamp)
            means.append(m)
            variances.append(v)
        mean = torch.cat(means).numpy() if means else np.zeros((0, self.num_heads))
        var = torch.cat(variances).numpy() if variances else np.zeros((0, self.num_heads))
        std = self.normalizer.y_std
        return mean * std + self.normalizer.y_mean, var * std**2

    # -- bookkeeping ----------------------------------------------------------

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups = {g: [] for g in PARAM_GROUPS}
        for name, p in self.named_parameters():
            if name in ("q_mu", "q_sqrt_raw"):
                groups["variational"].append((name, p))
            elif name == "Z":
                groups["inducing"].append((name, p))
            elif name.startswith("kernel."):
                groups["kernel"].append((name, p))
            elif name.startswith("mean."):
                groups["mean"].append((name, p))
            else:
                groups["noise"].append((name, p))
        return groups

    def to_dict(self) -> dict:
        state = {k: v.detach().numpy().tolist() for k, v in self.state_dict().items()}
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "num_heads": self.num_heads,
            "num_inducing": self.num_inducing,
            "input_dim": int(self.Z.shape[1]),
            "jitter": self.jitter,
            "kernel": self.kernel_config.model_dump(),
            "mean": self.mean_config.model_dump(),
            "normalizer": self.normalizer.to_dict(),
            "state": state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SparseGP":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint")
        gp = cls(np.zeros((d["num_inducing"], d["input_dim"])), d["num_heads"],
                 KernelConfig(**d["kernel"]), MeanConfig(**d["mean"]),
                 normalizer=Normalizer.from_dict(d["normalizer"]), jitter=d["jitter"])
        gp.load_state_dict({k: torch.tensor(v, dtype=DTYPE) for k, v in d["state"].items()})
        return gp


def elbo(gp: SparseGP, X, Y, total_n: int | None = None) -> float:
    with torch.no_grad():
        return float(gp.elbo(X, Y, total_n))


def elbo_gradients(gp: SparseGP, X, Y, total_n: int | None = None) -> dict[str, np.ndarray]:
    """Gradient of the ELBO with respect to every raw parameter."""
    gp.zero_grad()
    value = gp.elbo(X, Y, total_n)
    params = dict(gp.named_parameters())
    grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        out[name] = np.zeros(tuple(p.shape)) if g is None else g.detach().numpy().copy()
    return out


def predict(gp: SparseGP, X):
    return gp.predict(X)


# -- training -----------------------------------------------------------------


class FitConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    iterations: int = Field(1000, ge=0)
    learning_rate: float = Field(1e-2, gt=0)
    decay: float = Field(0.95, gt=0, le=1)
    batch_size: int = Field(5000, ge=1)
    optimizer: Literal["adam", "sgd"] = "adam"
    # lr decays once per epoch; an epoch is one pass over the data but never
    # shorter than this many iterations (full-batch desk-scale runs)
    min_epoch_iterations: int = Field(50, ge=1)
    input_noise: float = Field(0.0, ge=0)
    train: tuple[str, ...] = PARAM_GROUPS
    # "optimal" starts q(u) at its closed-form optimum for the initial hyperparameters
    init_q: Literal["keep", "optimal"] = "keep"


@dataclass
class FitReport:
    elbo_trace: list[float] = field(default_factory=list)  # per-point minibatch ELBO
    epoch_elbo: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    initial_elbo: float = float("nan")  # per-point, full data
    final_elbo: float = float("nan")
    iterations: int = 0
    epoch_length: int = 0


@torch.no_grad()
def full_elbo(gp: SparseGP, X, Y, chunk: int = 4096) -> float:
    """Full-data ELBO divided by the number of data points."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = X.shape[0]
    ell_total = 0.0
    kl = None
    for s in range(0, n, chunk):
        ell, kl = gp._elbo_terms(gp.normalizer.x_forward(X[s:s + chunk]), gp.normalizer.y_forward(Y[s:s + chunk]))
        ell_total += float(ell.sum())
    return (ell_total - float(kl.sum())) / n


def perturb_spatial(Xn: torch.Tensor, variance: float, rng: np.random.Generator) -> torch.Tensor:
    """Add N(0, variance) noise to the three spatial columns."""
    if variance <= 0:
        return Xn
    noise = rng.normal(0.0, math.sqrt(variance), size=(Xn.shape[0], 3))
    out = Xn.clone()
    out[:, :3] += torch.as_tensor(noise, dtype=DTYPE)
    return out


def fit(gp: SparseGP, X, Y, config: FitConfig | None = None, seed: int | np.random.Generator = 0,
        callback: Callable[[int, float], None] | None = None) -> FitReport:
    """Minibatch gradient ascent on the ELBO.

    Noise of variance ``config.input_noise`` is injected into the normalized
    spatial inputs, redrawn on every pass over the data.
    """
    config = config or FitConfig()
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("no training data")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    groups = gp.parameter_groups()
    unknown = set(config.train) - set(PARAM_GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups {sorted(unknown)}")
    params = [p for g in config.train for _, p in groups[g]]
    if config.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=config.learning_rate)
    else:
        opt = torch.optim.SGD(params, lr=config.learning_rate)

    Xn_all = gp.normalizer.x_forward(X)
    Yn_all = gp.normalizer.y_forward(Y)
    B = min(config.batch_size, n)
    batches_per_pass = math.ceil(n / B)
    epoch_len = max(batches_per_pass, config.min_epoch_iterations)

    if config.init_q == "optimal":
        gp.set_variational_optimal(X, Y)
    report = FitReport(epoch_length=epoch_len)
    report.initial_elbo = full_elbo(gp, X, Y)
    order, Xpass, cursor = None, None, batches_per_pass
    epoch_acc = []
    for it in range(config.iterations):
        if cursor == batches_per_pass:
            order = rng.permutation(n) if batches_per_pass > 1 else np.arange(n)
            Xpass = perturb_spatial(Xn_all, config.input_noise, rng)
            cursor = 0
        idx = torch.as_tensor(order[cursor * B:(cursor + 1) * B])
        cursor += 1
        lr = config.learning_rate * config.decay ** (it // epoch_len)
        for g in opt.param_groups:
            g["lr"] = lr
        opt.zero_grad()
        value = gp.elbo(Xpass[idx], Yn_all[idx], n, normalized=True) / n
        if not torch.isfinite(value):
            raise DivergenceError(f"diverged at iteration {it}", it)
        (-value).backward()
        opt.step()
        v = float(value.detach())
        report.elbo_trace.append(v)
        report.learning_rates.append(lr)
        epoch_acc.append(v)
        if len(epoch_acc) == epoch_len:
            report.epoch_elbo.append(float(np.mean(epoch_acc)))
            epoch_acc = []
        if callback is not None:
            callback(it, v)
    if epoch_acc:
        report.epoch_elbo.append(float(np.mean(epoch_acc)))
    report.iterations = config.iterations
    report.final_elbo = full_elbo(gp, X, Y)
    if not math.isfinite(report.final_elbo):
        raise DivergenceError(f"diverged at iteration {config.iterations}", config.iterations)
    return report
