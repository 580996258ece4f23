"""Variance-preserving diffusion process with a linear noise schedule.

The forward process is the SDE

    dz = -1/2 beta(t) z dt + sqrt(beta(t)) dw,      t in [0, t_max],

with the affine schedule ``beta(t) = beta_min + t * (beta_max - beta_min)``.
Because the drift is affine, the transition kernel from time ``s`` to time
``t`` is Gaussian in closed form:

    z(t) | z(s)  ~  N( z(s) * exp(-1/2 * B(s, t)),  (1 - exp(-B(s, t))) * I ),

where ``B(s, t) = integral of beta over [s, t]`` has the exact value
``beta_min * (t - s) + 1/2 * (beta_max - beta_min) * (t^2 - s^2)``.  For
unit-variance data the marginal variance stays 1 for all t (the variance
preserving property), and the marginal at ``t_max`` is approximately the
standard normal prior.

Times below ``t_min`` are avoided everywhere: the conditional score target
``-noise / std`` diverges as std -> 0, so training, likelihood integration
and reconstruction all treat ``t_min`` as the data endpoint.

The module also contains :class:`GaussianScoreOracle`, the closed-form
score of Gaussian data pushed through this process.  It exists so that
every downstream consumer (likelihood engine, sampler, trainer) can be
tested against exact answers.

Every operation is a pure function of (config, inputs, generator); configs
are frozen dataclasses, so sharing them across threads is safe.  Generator
state belongs to the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DomainError

__all__ = [
    "VpSdeConfig",
    "PerturbParams",
    "beta",
    "integral_beta",
    "drift_diffusion",
    "perturb_params",
    "sample_perturbation",
    "prior_logpdf",
    "analytic_gaussian_score",
    "GaussianScoreOracle",
]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class VpSdeConfig:
    """Schedule and time horizon of the diffusion process.

    Parameters
    ----------
    beta_min, beta_max : float
        Endpoints of the linear noise-rate schedule.
    t_min : float
        Lower integration cutoff standing in for t=0 (see module notes).
    t_max : float
        Time horizon; the marginal at t_max is treated as the prior.
    """

    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: float = 1e-5
    t_max: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.beta_min < self.beta_max):
            raise DomainError(
                f"need 0 < beta_min < beta_max, got ({self.beta_min}, {self.beta_max})"
            )
        if not (0.0 < self.t_min < self.t_max):
            raise DomainError(
                f"need 0 < t_min < t_max, got ({self.t_min}, {self.t_max})"
            )

    def to_dict(self) -> dict:
        return {
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "t_min": self.t_min,
            "t_max": self.t_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VpSdeConfig":
        return cls(**d)


@dataclass(frozen=True)
class PerturbParams:
    """Mean coefficient and standard deviation of the Gaussian kernel.

    ``z_t = mean_coeff * z_from + std * noise`` with standard-normal noise.
    ``mean_coeff**2 + std**2 == 1`` holds exactly for kernels started at 0.
    """

    mean_coeff: float
    std: float


def _check_time(cfg: VpSdeConfig, t) -> None:
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > cfg.t_max):
        raise DomainError(f"time {t} outside [0, {cfg.t_max}]")


def beta(cfg: VpSdeConfig, t):
    """Instantaneous noise rate ``beta_min + t * (beta_max - beta_min)``."""
    _check_time(cfg, t)
    return cfg.beta_min + t * (cfg.beta_max - cfg.beta_min)


def integral_beta(cfg: VpSdeConfig, t, t_from=0.0):
    """Exact integral of beta over ``[t_from, t]``.

    The schedule is affine, so the antiderivative
    ``beta_min * t + 1/2 * (beta_max - beta_min) * t**2`` is closed form;
    no quadrature error enters the perturbation kernel.
    """
    _check_time(cfg, t)
    _check_time(cfg, t_from)
    if np.any(np.asarray(t) < np.asarray(t_from)):
        raise DomainError(f"integration interval reversed: t={t} < t_from={t_from}")

    def anti(u):
        return cfg.beta_min * u + 0.5 * (cfg.beta_max - cfg.beta_min) * u * u

    return anti(t) - anti(t_from)


def drift_diffusion(cfg: VpSdeConfig, z, t):
    """Forward drift ``-1/2 beta(t) z`` and diffusion ``sqrt(beta(t))``."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DataError("non-finite values in state passed to drift_diffusion")
    b = beta(cfg, t)
    return -0.5 * b * z, math.sqrt(b)


def perturb_params(cfg: VpSdeConfig, t, t_from=0.0) -> PerturbParams:
    """Gaussian kernel parameters for the transition from ``t_from`` to ``t``."""
    ib = integral_beta(cfg, t, t_from=t_from)
    mean_coeff = np.exp(-0.5 * ib)
    std = np.sqrt(1.0 - np.exp(-ib))
    if np.ndim(t) == 0 and np.ndim(t_from) == 0:
        return PerturbParams(float(mean_coeff), float(std))
    return PerturbParams(mean_coeff, std)


def sample_perturbation(cfg: VpSdeConfig, z0, t, rng: np.random.Generator, t_from=0.0):
    """Draw ``z_t`` from the kernel and return ``(z_t, noise)``.

    The noise is returned alongside the sample because the training
    objective regresses ``-noise / std``; callers form the target from the
    same draw.  ``t`` may be a scalar or a per-row array matching a 2-D
    ``z0`` batch.
    """
    z0 = np.asarray(z0, dtype=float)
    params = perturb_params(cfg, t, t_from=t_from)
    noise = rng.standard_normal(z0.shape)
    mean_coeff = np.asarray(params.mean_coeff)
    std = np.asarray(params.std)
    if mean_coeff.ndim == 1 and z0.ndim == 2:
        mean_coeff = mean_coeff[:, None]
        std = std[:, None]
    z_t = mean_coeff * z0 + std * noise
    return z_t, noise


def prior_logpdf(z):
    """Log-density of the standard normal prior at ``z``.

    Accepts a flat sample ``(d,)`` or a batch ``(n, d)``; sums over the
    last axis.
    """
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DataError("non-finite values passed to prior_logpdf")
    d = z.shape[-1]
    sq = np.sum(z * z, axis=-1)
    out = -0.5 * sq - 0.5 * d * LOG_2PI
    return float(out) if np.ndim(out) == 0 else out


def _marginal_variance(cfg: VpSdeConfig, t, data_std: float):
    p = perturb_params(cfg, t)
    return (p.mean_coeff * data_std) ** 2 + p.std**2


def analytic_gaussian_score(cfg: VpSdeConfig, z, t, data_mean, data_std: float):
    """Exact marginal score when the data law is ``N(data_mean, data_std^2 I)``.

    Gaussian data stays Gaussian under the Gaussian kernel: the marginal at
    time t is ``N(mu_t * data_mean, (mu_t^2 data_std^2 + sigma_t^2) I)``,
    whose score is linear in z.
    """
    if data_std <= 0:
        raise DomainError(f"data_std must be positive, got {data_std}")
    z = np.asarray(z, dtype=float)
    p = perturb_params(cfg, t)
    mean_coeff = np.asarray(p.mean_coeff)
    var = (mean_coeff * data_std) ** 2 + np.asarray(p.std) ** 2
    if mean_coeff.ndim == 1 and z.ndim == 2:
        mean_coeff = mean_coeff[:, None]
        var = var[:, None]
    return -(z - mean_coeff * np.asarray(data_mean, dtype=float)) / var


class GaussianScoreOracle:
    """Closed-form score network for Gaussian data, used as a test oracle.

    Implements the inference surface of a score network (``evaluate`` and
    ``vjp``) with zero approximation error.  The Jacobian of the score is
    ``-I / var_t``, so vector-Jacobian products are exact one-liners.
    """

    def __init__(self, cfg: VpSdeConfig, input_dim: int, data_mean=0.0, data_std: float = 1.0):
        if data_std <= 0:
            raise DomainError(f"data_std must be positive, got {data_std}")
        self.cfg = cfg
        self.input_dim = int(input_dim)
        self.data_mean = np.broadcast_to(
            np.asarray(data_mean, dtype=float), (self.input_dim,)
        ).copy()
        self.data_std = float(data_std)

    def evaluate(self, z, t):
        return analytic_gaussian_score(self.cfg, z, t, self.data_mean, self.data_std)

    def vjp(self, z, t, v):
        v = np.asarray(v, dtype=float)
        var = np.asarray(_marginal_variance(self.cfg, t, self.data_std))
        if var.ndim == 1 and v.ndim == 2:
            var = var[:, None]
        return -v / var

    def evaluate_and_vjp(self, z, t, v):
        return self.evaluate(z, t), np.atleast_2d(self.vjp(z, t, v))

    def marginal_logpdf(self, z, t):
        """Exact log-density of the time-t marginal; ground truth for bpd."""
        z = np.asarray(z, dtype=float)
        p = perturb_params(self.cfg, t)
        var = (p.mean_coeff * self.data_std) ** 2 + p.std**2
        d = z.shape[-1]
        sq = np.sum((z - p.mean_coeff * self.data_mean) ** 2, axis=-1)
        out = -0.5 * sq / var - 0.5 * d * (LOG_2PI + math.log(var))
        return float(out) if np.ndim(out) == 0 else out
