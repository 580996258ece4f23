"""Adaptive Dormand-Prince 5(4) integrator.

Classic explicit embedded Runge-Kutta pair (Hairer, Norsett & Wanner,
"Solving ODEs I", table 5.2): the 5th-order solution is propagated and the
difference to the embedded 4th-order solution drives the step size.  The
first-same-as-last property makes an accepted step cost six right-hand-side
evaluations.

Error control uses the standard mixed norm

    err = sqrt( mean( (e_i / (atol + rtol * max(|y_i|, |y_new_i|)))^2 ) )

and a PI controller (exponents 0.7/5 and 0.4/5) for smooth step-size
evolution.  The solver only ever needs the terminal state here, so no
dense output is kept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, SolverError

__all__ = ["OdeSolverConfig", "OdeSolution", "integrate"]

# Dormand-Prince coefficients.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_E = _B5 - _B4

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_PI_ALPHA = 0.7 / 5.0
_PI_BETA = 0.4 / 5.0


@dataclass(frozen=True)
class OdeSolverConfig:
    """Tolerances and step limits for the adaptive integrator."""

    rtol: float = 1e-5
    atol: float = 1e-5
    max_steps: int = 100_000
    initial_step: float = 1e-3

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError(f"tolerances must be positive, got {self.rtol}, {self.atol}")
        if self.initial_step <= 0:
            raise ValueError(f"initial_step must be positive, got {self.initial_step}")

    def to_dict(self) -> dict:
        return {
            "rtol": self.rtol,
            "atol": self.atol,
            "max_steps": self.max_steps,
            "initial_step": self.initial_step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OdeSolverConfig":
        return cls(**d)


@dataclass
class OdeSolution:
    """Terminal state plus solver diagnostics."""

    t: float
    y: np.ndarray
    n_steps: int
    n_rejected: int
    nfev: int


def _error_norm(e, y0, y1, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean((e / scale) ** 2)))


def integrate(fn, t0: float, t1: float, y0, cfg: OdeSolverConfig) -> OdeSolution:
    """Integrate ``dy/dt = fn(t, y)`` from t0 to t1 (forward in t).

    Raises :class:`SolverError` with the time reached when the step budget
    runs out, and :class:`NumericalError` if the right-hand side or the
    state stops being finite.
    """
    if t1 <= t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    y = np.array(y0, dtype=float)
    t = float(t0)
    h = min(cfg.initial_step, t1 - t0)

    k = np.empty((7, y.size))
    k[0] = fn(t, y)  # stays valid across rejections; refreshed by FSAL on accept
    nfev = 1
    if not np.all(np.isfinite(k[0])):
        raise NumericalError(f"non-finite derivative at t={t}")

    n_accepted = 0
    n_rejected = 0
    err_prev = 1e-4

    for _ in range(cfg.max_steps):
        remaining = t1 - t
        if remaining <= 0:
            break
        if h < 1e-14 * max(1.0, abs(t)):
            raise SolverError(f"step size underflow at t={t}", t_reached=t)
        is_last = h >= remaining
        h_step = remaining if is_last else h

        for i in range(1, 7):
            yi = y + h_step * (k[:i].T @ _A[i])
            k[i] = fn(t + _C[i] * h_step, yi)
        nfev += 6

        if not np.all(np.isfinite(k)):
            raise NumericalError(f"non-finite derivative inside step at t={t}")

        y_new = y + h_step * (k.T @ _B5)
        err = _error_norm(h_step * (k.T @ _E), y, y_new, cfg.rtol, cfg.atol)

        if err <= 1.0:
            t = t1 if is_last else t + h_step
            y = y_new
            k[0] = k[6]  # first-same-as-last
            n_accepted += 1
            if err == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = _SAFETY * err ** (-_PI_ALPHA) * err_prev**_PI_BETA
            err_prev = max(err, 1e-4)
            h = h_step * min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
        else:
            n_rejected += 1
            h = h_step * max(_MIN_FACTOR, _SAFETY * err ** (-0.2))
    else:
        raise SolverError(
            f"exceeded {cfg.max_steps} steps, reached t={t} of {t1}", t_reached=t
        )

    return OdeSolution(t=t, y=y, n_steps=n_accepted, n_rejected=n_rejected, nfev=nfev)
