"""Shared fixtures and hand-built score models used as test oracles."""

from __future__ import annotations

import numpy as np
import pytest

from anoscore.nets import MlpScoreConfig, MlpScoreNet
from anoscore.sde import VpSdeConfig


@pytest.fixture
def sde():
    return VpSdeConfig()


class ZeroScore:
    """s(z, t) = 0 with a zero Jacobian."""

    def __init__(self, input_dim):
        self.input_dim = input_dim

    def evaluate(self, z, t):
        return np.zeros_like(np.asarray(z, dtype=float))

    def vjp(self, z, t, v):
        return np.zeros_like(np.asarray(v, dtype=float))


class LinearScore:
    """s(z) = A z, time independent; Jacobian is A."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=float)
        self.input_dim = self.a.shape[0]

    def evaluate(self, z, t):
        return np.asarray(z, dtype=float) @ self.a.T

    def vjp(self, z, t, v):
        return np.asarray(v, dtype=float) @ self.a


class ShiftedModel:
    """Wraps a model and adds a fixed offset to its output."""

    def __init__(self, base, offset):
        self.base = base
        self.offset = np.asarray(offset, dtype=float)
        self.input_dim = base.input_dim

    def evaluate(self, z, t):
        return np.asarray(self.base.evaluate(z, t)) + self.offset

    def vjp(self, z, t, v):
        return self.base.vjp(z, t, v)


def build_neg_identity_mlp(dim: int, gate: float = 30.0) -> MlpScoreNet:
    """Hand-built MLP whose output is -z to ~1e-11.

    Each input coordinate feeds a pair of hidden units biased far into the
    linear region of the smooth gate: silu(x + c) - silu(c - x) ~ 2x for
    |x| << c, and the final layer scales by -1/2.
    """
    cfg = MlpScoreConfig(input_dim=dim, hidden_dims=(2 * dim,), time_embed_dim=4)
    net = MlpScoreNet(cfg, np.random.default_rng(0))
    w1 = np.zeros((dim + 4, 2 * dim))
    for i in range(dim):
        w1[i, 2 * i] = 1.0
        w1[i, 2 * i + 1] = -1.0
    b1 = np.full(2 * dim, gate)
    w2 = np.zeros((2 * dim, dim))
    for i in range(dim):
        w2[2 * i, i] = -0.5
        w2[2 * i + 1, i] = 0.5
    b2 = np.zeros(dim)
    net.set_params(np.concatenate([w1.ravel(), b1, w2.ravel(), b2]))
    return net
