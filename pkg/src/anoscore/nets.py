"""Score networks: a pluggable interface plus an MLP reference implementation.

A score network approximates the gradient of the log-density of the noised
data, ``s(z, t) ~ grad_z log p_t(z)``.  Consumers need exactly two things
at inference time:

* ``evaluate(z, t)`` -> vector of the same dimension as ``z``;
* ``vjp(z, t, v)``   -> the row-vector-Jacobian product ``v^T ds/dz``,
  which the likelihood engine dots with probe vectors to estimate the
  divergence of the density flow.

The reference network is a plain MLP over ``concat(z, time_embedding(t))``
with reverse-mode differentiation written out by hand, so the package has
no autodiff dependency and vector-Jacobian products are exact.  Training
code drives it through ``forward_batch`` / ``param_grad``.

All math runs in float64; parameters live in flat float64 vectors ordered
layer by layer (weights row-major, then bias).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import ConfigError

__all__ = [
    "ScoreNetwork",
    "MlpScoreConfig",
    "MlpScoreNet",
    "NegativeIdentityScore",
    "time_embedding",
    "finite_difference_jvp",
]


class ScoreNetwork(Protocol):
    """Minimal inference surface shared by learned networks and oracles."""

    input_dim: int

    def evaluate(self, z, t): ...

    def vjp(self, z, t, v): ...


def time_embedding(t, dim: int):
    """Sinusoidal embedding of a scalar time (or a batch of times).

    Frequencies follow the usual geometric ladder
    ``w_k = exp(-k ln(1e4) / (dim/2 - 1))``; element ``2k`` is
    ``sin(1000 t w_k)`` and element ``2k+1`` is ``cos(1000 t w_k)``.  The
    factor 1000 stretches the unit time interval onto the range the ladder
    was designed for, so nearby times stay distinguishable.
    """
    if dim % 2 != 0 or dim < 2:
        raise ConfigError(f"time embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    if half > 1:
        freqs = np.exp(-np.arange(half) * (math.log(1e4) / (half - 1)))
    else:
        freqs = np.ones(1)
    t = np.asarray(t, dtype=float)
    arg = 1000.0 * t[..., None] * freqs
    emb = np.empty(t.shape + (dim,))
    emb[..., 0::2] = np.sin(arg)
    emb[..., 1::2] = np.cos(arg)
    return emb


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activation(name: str):
    if name == "silu":

        def f(x):
            return x * _sigmoid(x)

        def df(x):
            s = _sigmoid(x)
            return s * (1.0 + x * (1.0 - s))

    elif name == "tanh":
        f = np.tanh

        def df(x):
            return 1.0 - np.tanh(x) ** 2

    else:
        raise ConfigError(f"unknown activation {name!r} (use 'silu' or 'tanh')")
    return f, df


@dataclass(frozen=True)
class MlpScoreConfig:
    """Architecture of the reference MLP score network."""

    input_dim: int
    hidden_dims: tuple = (256, 256)
    time_embed_dim: int = 64
    activation: str = "silu"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.time_embed_dim)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"all dims must be >= 1, got {dims}")
        if self.time_embed_dim % 2 != 0:
            raise ConfigError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        _activation(self.activation)

    @property
    def layer_dims(self):
        """(fan_in, fan_out) per layer, embedding concatenated to the input."""
        sizes = [self.input_dim + self.time_embed_dim, *self.hidden_dims, self.input_dim]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "time_embed_dim": self.time_embed_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpScoreConfig":
        d = dict(d)
        d["hidden_dims"] = tuple(d.get("hidden_dims", (256, 256)))
        return cls(**d)


class MlpScoreNet:
    """MLP score network with hand-written reverse mode.

    The final layer is zero-initialized so a fresh network outputs the zero
    score, which matches the prior's score at high noise and keeps early
    training stable.  Hidden layers use Glorot-uniform weights.
    """

    def __init__(self, cfg: MlpScoreConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.input_dim = cfg.input_dim
        self._act, self._dact = _activation(cfg.activation)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        last = len(cfg.layer_dims) - 1
        for i, (fi, fo) in enumerate(cfg.layer_dims):
            if i == last:
                w = np.zeros((fi, fo))
            else:
                bound = math.sqrt(6.0 / (fi + fo))
                w = rng.uniform(-bound, bound, size=(fi, fo))
            self.weights.append(w)
            self.biases.append(np.zeros(fo))

    # ---- parameter vector ----

    @property
    def n_params(self) -> int:
        return self.cfg.n_params

    def get_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ConfigError(
                f"parameter vector has length {flat.size}, network needs {self.n_params}"
            )
        pos = 0
        for i, (fi, fo) in enumerate(self.cfg.layer_dims):
            self.weights[i] = flat[pos : pos + fi * fo].reshape(fi, fo).copy()
            pos += fi * fo
            self.biases[i] = flat[pos : pos + fo].copy()
            pos += fo

    # ---- forward ----

    def _check_input(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.input_dim:
            raise ConfigError(
                f"input has dim {z.shape[-1]}, network expects {self.input_dim}"
            )
        return z

    def forward_batch(self, z, t):
        """Forward pass on a batch; returns (output, cache) for backprop.

        ``z`` is (n, input_dim) and ``t`` is scalar or (n,).
        """
        z = np.atleast_2d(self._check_input(z))
        t = np.broadcast_to(np.asarray(t, dtype=float), (z.shape[0],))
        x = np.concatenate([z, time_embedding(t, self.cfg.time_embed_dim)], axis=1)
        pre, post = [], [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            pre.append(h)
            if i != last:
                h = self._act(h)
            post.append(h)
        return h, (pre, post)

    def evaluate(self, z, t):
        """Score estimate at (z, t); accepts (d,) or (n, d) input."""
        z = self._check_input(z)
        single = z.ndim == 1
        out, _ = self.forward_batch(z, t)
        return out[0] if single else out

    # ---- reverse mode ----

    def _backprop(self, cache, upstream, need_params: bool):
        pre, post = cache
        last = len(self.weights) - 1
        g = np.atleast_2d(upstream)
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        for i in range(last, -1, -1):
            if i != last:
                g = g * self._dact(pre[i])
            if need_params:
                grads_w[i] = post[i].T @ g
                grads_b[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return g, grads_w, grads_b

    def param_grad(self, cache, upstream) -> np.ndarray:
        """Flat gradient of a scalar loss given d(loss)/d(output) per row."""
        _, gw, gb = self._backprop(cache, upstream, need_params=True)
        parts = []
        for w, b in zip(gw, gb):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def vjp(self, z, t, v):
        """Exact ``v^T ds/dz`` via reverse mode through the network.

        The time embedding does not depend on z, so only the leading
        ``input_dim`` columns of the input gradient are returned.
        """
        z = self._check_input(z)
        v = np.asarray(v, dtype=float)
        single = z.ndim == 1
        _, cache = self.forward_batch(z, t)
        g, _, _ = self._backprop(cache, np.atleast_2d(v), need_params=False)
        g = g[:, : self.input_dim]
        return g[0] if single else g

    def evaluate_and_vjp(self, z, t, v):
        """Score and ``v^T ds/dz`` sharing one forward pass.

        ``z`` is a single point; ``v`` may stack several row vectors
        (k, input_dim), each backpropagated through the same cache.  The
        likelihood engine calls this once per right-hand-side evaluation.
        """
        z = self._check_input(z)
        out, cache = self.forward_batch(z, t)
        g, _, _ = self._backprop(cache, np.atleast_2d(v), need_params=False)
        return out[0], g[:, : self.input_dim]


@dataclass
class NegativeIdentityScore:
    """The degenerate network ``s(z, t) = -z``.

    This is the exact score of a standard normal for every t under the
    variance-preserving process, so the density flow it induces is the
    identity: a convenient fixture for solver and likelihood tests.
    """

    input_dim: int = 0

    def evaluate(self, z, t):
        return -np.asarray(z, dtype=float)

    def vjp(self, z, t, v):
        return -np.asarray(v, dtype=float)


def finite_difference_jvp(model, z, t, v, delta: float | None = None):
    """Central-difference Jacobian-vector product ``(ds/dz) v``.

    Fallback for black-box score functions that do not expose ``vjp``.
    For the symmetric quadratic forms the divergence estimator needs,
    ``dot(jvp(v), v) == dot(vjp(v), v)``, so either product works.
    """
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    if delta is None:
        delta = 1e-3 * (1.0 + np.max(np.abs(z)))
    s_plus = model.evaluate(z + delta * v, t)
    s_minus = model.evaluate(z - delta * v, t)
    return (np.asarray(s_plus) - np.asarray(s_minus)) / (2.0 * delta)
