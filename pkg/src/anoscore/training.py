"""Denoising score-matching training and checkpoint persistence.

The continuous objective draws, per sample, a time t uniformly from
[t_min, t_max], noises the sample through the closed-form Gaussian kernel
and regresses the conditional score ``-noise / sigma_t``.  With the
default weighting ``lambda(t) = sigma_t^2`` the per-sample loss collapses
to noise prediction,

    || sigma_t * s(z_t, t) + noise ||^2,

which is the variance-stabilized form: near t_min the raw score target
blows up like 1/sigma while this stays O(1).  A unit-weighting mode is
kept for ablations.

Features are standardized per channel before entering the diffusion (the
prior is unit-scale; raw features are not); the statistics are computed
from training data only and stored in the checkpoint so scoring is
self-contained.

Checkpoint file layout: 8-byte magic ``ADODECKP``, u32 version (1), u32
header length, a UTF-8 JSON header (sde / scale / net / norm / metadata),
then the raw little-endian float32 parameter block in declaration order.
Parameters are quantized to float32 when the checkpoint is created, so
save/load round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError, NumericalError
from .features import FeatureTensor
from .nets import MlpScoreConfig, MlpScoreNet
from .sde import VpSdeConfig, perturb_params, sample_perturbation

__all__ = [
    "TrainConfig",
    "NormStats",
    "ScoreModelCheckpoint",
    "AdamState",
    "adam_step",
    "fit_norm_stats",
    "draw_dsm_batch",
    "dsm_loss_at",
    "dsm_loss_grad_at",
    "dsm_loss_and_grad",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

_MAGIC = b"ADODECKP"
_VERSION = 1
_STD_FLOOR = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-4
    seed: int = 0
    lambda_weighting: str = "sigma_squared"
    t_sampling: str = "uniform"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lambda_weighting not in ("sigma_squared", "unit"):
            raise ConfigError(f"unknown weighting {self.lambda_weighting!r}")
        if self.t_sampling != "uniform":
            raise ConfigError(f"only uniform time sampling is supported, got {self.t_sampling!r}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "lambda_weighting": self.lambda_weighting,
            "t_sampling": self.t_sampling,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class NormStats:
    """Per-channel standardization statistics; std floored at 1e-6."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).ravel()
        self.std = np.asarray(self.std, dtype=float).ravel()
        if self.mean.shape != self.std.shape:
            raise DataError("norm mean/std length mismatch")
        if np.any(self.std <= 0):
            raise DataError("norm std must be positive")

    def apply(self, grid_values: np.ndarray) -> np.ndarray:
        """Standardize an (..., c) array."""
        return (grid_values - self.mean) / self.std

    def invert(self, grid_values: np.ndarray) -> np.ndarray:
        return grid_values * self.std + self.mean

    def normalize_tensor(self, ft: FeatureTensor) -> np.ndarray:
        """Flat standardized float64 vector of one feature tensor."""
        if ft.c != self.mean.size:
            raise DataError(f"tensor has {ft.c} channels, norm stats have {self.mean.size}")
        return self.apply(ft.flat().reshape(-1, self.mean.size)).ravel()

    def log_std_sum(self, h: int, w: int) -> float:
        """Sum of log std over all positions; the standardization Jacobian."""
        return float(h * w * np.sum(np.log(self.std)))


def fit_norm_stats(train_features: list[FeatureTensor]) -> NormStats:
    """Per-channel mean / population std over all samples and positions."""
    if not train_features:
        raise DataError("cannot fit normalization stats on an empty dataset")
    c = train_features[0].c
    rows = []
    for ft in train_features:
        if ft.c != c:
            raise DataError("feature tensors disagree on channel count")
        rows.append(ft.flat().reshape(-1, c))
    stacked = np.concatenate(rows, axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), _STD_FLOOR)
    return NormStats(mean=mean, std=std)


# ---------------------------------------------------------------------------
# objective


def draw_dsm_batch(sde: VpSdeConfig, batch: np.ndarray, rng: np.random.Generator):
    """Per-sample times t ~ U(t_min, t_max) and kernel draws for one batch.

    Times are drawn per sample, not per batch, which lowers gradient
    variance.  Consumes the generator in a fixed order (times, then noise)
    for reproducibility.
    """
    n = batch.shape[0]
    t = rng.uniform(sde.t_min, sde.t_max, size=n)
    z_t, noise = sample_perturbation(sde, batch, t, rng)
    return z_t, t, noise


def dsm_loss_at(model, sde: VpSdeConfig, z_t, t, noise, weighting: str = "sigma_squared"):
    """Batch-mean score-matching loss at given noised points.

    Works for any model exposing ``evaluate``; used to compare learned
    networks against analytic oracles on identical draws.
    """
    z_t = np.atleast_2d(np.asarray(z_t, dtype=float))
    t = np.asarray(t, dtype=float)
    noise = np.atleast_2d(np.asarray(noise, dtype=float))
    sigma = np.asarray(perturb_params(sde, t).std)
    s = np.atleast_2d(np.asarray(model.evaluate(z_t, t), dtype=float))
    if weighting == "sigma_squared":
        resid = sigma[:, None] * s + noise
    elif weighting == "unit":
        resid = s + noise / sigma[:, None]
    else:
        raise ConfigError(f"unknown weighting {weighting!r}")
    return float(np.mean(np.sum(resid * resid, axis=1)))


def dsm_loss_grad_at(
    model: MlpScoreNet, sde: VpSdeConfig, z_t, t, noise, weighting: str = "sigma_squared"
):
    """Loss and exact parameter gradient at frozen (z_t, t, noise) draws."""
    z_t = np.atleast_2d(np.asarray(z_t, dtype=float))
    noise = np.atleast_2d(np.asarray(noise, dtype=float))
    n = z_t.shape[0]
    sigma = np.asarray(perturb_params(sde, t).std)
    out, cache = model.forward_batch(z_t, t)
    if weighting == "sigma_squared":
        resid = sigma[:, None] * out + noise
        upstream = (2.0 / n) * sigma[:, None] * resid
    elif weighting == "unit":
        resid = out + noise / sigma[:, None]
        upstream = (2.0 / n) * resid
    else:
        raise ConfigError(f"unknown weighting {weighting!r}")
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    grad = model.param_grad(cache, upstream)
    return loss, grad


def dsm_loss_and_grad(
    model: MlpScoreNet,
    sde: VpSdeConfig,
    batch,
    rng: np.random.Generator,
    weighting: str = "sigma_squared",
):
    """Draw per-sample (t, noise), return the loss and its parameter gradient."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    z_t, t, noise = draw_dsm_batch(sde, batch, rng)
    return dsm_loss_grad_at(model, sde, z_t, t, noise, weighting)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), step=0)


def adam_step(
    state: AdamState,
    params: np.ndarray,
    grad: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One bias-corrected Adam update; returns (new_state, new_params)."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ConfigError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
    step = state.step + 1
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite gradient at optimizer step {step}")
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(m=m, v=v, step=step), new_params


# ---------------------------------------------------------------------------
# checkpoint


@dataclass
class ScoreModelCheckpoint:
    """Trained parameters plus everything needed to score features."""

    sde: VpSdeConfig
    scale_id: str
    h: int
    w: int
    c: int
    net: MlpScoreConfig
    params: np.ndarray
    norm: NormStats
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float).ravel()
        if self.params.size != self.net.n_params:
            raise ConfigError(
                f"checkpoint has {self.params.size} parameters, "
                f"network config needs {self.net.n_params}"
            )
        if self.h * self.w * self.c != self.net.input_dim:
            raise ConfigError(
                f"scale dims ({self.h}, {self.w}, {self.c}) do not flatten to "
                f"network input_dim {self.net.input_dim}"
            )

    def build_model(self) -> MlpScoreNet:
        model = MlpScoreNet(self.net)
        model.set_params(self.params)
        return model

    def __eq__(self, other):
        if not isinstance(other, ScoreModelCheckpoint):
            return NotImplemented
        return (
            self.sde == other.sde
            and (self.scale_id, self.h, self.w, self.c) == (other.scale_id, other.h, other.w, other.c)
            and self.net == other.net
            and np.array_equal(self.params, other.params)
            and np.array_equal(self.norm.mean, other.norm.mean)
            and np.array_equal(self.norm.std, other.norm.std)
            and self.metadata == other.metadata
        )


def train(
    dataset: list[FeatureTensor],
    sde: VpSdeConfig,
    net_cfg: MlpScoreConfig,
    train_cfg: TrainConfig,
    progress=None,
) -> ScoreModelCheckpoint:
    """Fit a score network on one scale's normal features.

    Fully reproducible from ``train_cfg.seed``: initialization, epoch
    shuffles and noise draws all consume one generator in a fixed order.
    ``progress(step, loss, wall_seconds)`` is invoked once per step when
    given.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    h, w, c = dataset[0].h, dataset[0].w, dataset[0].c
    scale_id = dataset[0].scale_id
    for ft in dataset:
        if (ft.h, ft.w, ft.c) != (h, w, c):
            raise DataError("training features disagree on dims")
    if h * w * c != net_cfg.input_dim:
        raise ConfigError(
            f"features flatten to {h * w * c}, network expects {net_cfg.input_dim}"
        )

    norm = fit_norm_stats(dataset)
    data = np.stack([norm.normalize_tensor(ft) for ft in dataset])
    n = data.shape[0]

    rng = np.random.default_rng(train_cfg.seed)
    model = MlpScoreNet(net_cfg, rng=rng)
    params = model.get_params()
    opt = AdamState.zeros(params.size)

    t0 = time.perf_counter()
    step = 0
    final_loss = None
    for _ in range(train_cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            batch = data[order[start : start + train_cfg.batch_size]]
            loss, grad = dsm_loss_and_grad(
                model, sde, batch, rng, weighting=train_cfg.lambda_weighting
            )
            opt, params = adam_step(opt, params, grad, train_cfg.learning_rate)
            if not np.all(np.isfinite(params)):
                raise NumericalError(f"non-finite parameters after step {step + 1}")
            model.set_params(params)
            step += 1
            final_loss = loss
            if progress is not None:
                progress(step, loss, time.perf_counter() - t0)

    # float32 is the checkpoint storage precision; quantize now so that
    # save/load round-trips are exact identities.
    params = params.astype(np.float32).astype(np.float64)
    metadata = {
        "epochs": train_cfg.epochs,
        "steps": step,
        "final_loss": final_loss,
        "seed": train_cfg.seed,
    }
    return ScoreModelCheckpoint(
        sde=sde, scale_id=scale_id, h=h, w=w, c=c,
        net=net_cfg, params=params, norm=norm, metadata=metadata,
    )


def save_checkpoint(ckpt: ScoreModelCheckpoint, path) -> None:
    header = {
        "sde": ckpt.sde.to_dict(),
        "scale": {"scale_id": ckpt.scale_id, "h": ckpt.h, "w": ckpt.w, "c": ckpt.c},
        "net": ckpt.net.to_dict(),
        "norm": {"mean": ckpt.norm.mean.tolist(), "std": ckpt.norm.std.tolist()},
        "metadata": ckpt.metadata,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        fh.write(ckpt.params.astype("<f4").tobytes())


def load_checkpoint(path) -> ScoreModelCheckpoint:
    data = open(path, "rb").read()
    if data[:8] != _MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint file")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    version, header_len = struct.unpack("<II", data[8:16])
    if version != _VERSION:
        raise FormatError(
            f"{path}: unsupported checkpoint version {version}, this build reads {_VERSION}"
        )
    if len(data) < 16 + header_len:
        raise FormatError(f"{path}: truncated at offset {len(data)}, header needs {header_len} bytes")
    try:
        header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc

    net = MlpScoreConfig.from_dict(header["net"])
    payload = data[16 + header_len :]
    if len(payload) != 4 * net.n_params:
        raise FormatError(
            f"{path}: parameter block has {len(payload)} bytes, "
            f"config needs {4 * net.n_params}"
        )
    params = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    scale = header["scale"]
    return ScoreModelCheckpoint(
        sde=VpSdeConfig.from_dict(header["sde"]),
        scale_id=scale["scale_id"],
        h=scale["h"],
        w=scale["w"],
        c=scale["c"],
        net=net,
        params=params,
        norm=NormStats(mean=header["norm"]["mean"], std=header["norm"]["std"]),
        metadata=header["metadata"],
    )
