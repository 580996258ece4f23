"""End-to-end anomaly scoring and localization.

Scoring: each scale's features are standardized with the stats stored in
that scale's checkpoint, pushed through the likelihood engine, and the
standardization Jacobian (sum of log stds) is added back so the reported
bits-per-dimension refer to raw feature space.  The anomaly score of a
sample is the arithmetic mean of its per-scale bpd values; high score
means low density.

Localization: features of a designated scale are partially noised and
denoised by the sampler, a decoder maps the reconstructed features back
to an image, and the elementwise squared error against the original image
is the heatmap.  The reference decoder is a per-cell linear map from
feature channels to a pixel patch (nearest-neighbor resized if the patch
grid misses the image size) averaged across decoded scales; it is enough
because the baseline extractor's mean channel is already a downsample of
the image.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .features import FeatureTensor, bilinear_resize
from .likelihood import HutchinsonConfig, log_likelihood
from .metrics import LabeledScores, accuracy_at, auroc, best_f1
from .odeint import OdeSolverConfig
from .sampler import SamplerConfig, reconstruct
from .sde import VpSdeConfig
from .training import ScoreModelCheckpoint

__all__ = [
    "MultiScaleModel",
    "AnomalyReport",
    "DecoderConfig",
    "LinearPatchDecoder",
    "score_sample",
    "train_decoder",
    "localize",
    "scale_ablation",
    "write_reports",
    "read_reports",
]

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


@dataclass
class MultiScaleModel:
    """Ordered per-scale checkpoints sharing one diffusion config."""

    checkpoints: list

    def __post_init__(self):
        if not self.checkpoints:
            raise ConfigError("need at least one scale checkpoint")
        ids = [c.scale_id for c in self.checkpoints]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate scale ids in model: {ids}")
        sdes = {c.sde for c in self.checkpoints}
        if len(sdes) != 1:
            raise ConfigError("scale checkpoints disagree on the diffusion config")
        self._models = {c.scale_id: c.build_model() for c in self.checkpoints}

    @property
    def sde(self) -> VpSdeConfig:
        return self.checkpoints[0].sde

    @property
    def scale_ids(self) -> list:
        return [c.scale_id for c in self.checkpoints]

    def checkpoint(self, scale_id: str) -> ScoreModelCheckpoint:
        for c in self.checkpoints:
            if c.scale_id == scale_id:
                return c
        raise ConfigError(f"model has no scale {scale_id!r}")

    def network(self, scale_id: str):
        return self._models[scale_id]


@dataclass
class AnomalyReport:
    """Per-sample scoring result; ``score`` is the mean of per-scale bpd."""

    id: str
    per_scale_bpd: dict
    score: float = None
    label: str | None = None
    heatmap: np.ndarray | None = None
    nfe: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.score is None:
            self.score = float(np.mean(list(self.per_scale_bpd.values())))
        if self.heatmap is not None:
            self.heatmap = np.asarray(self.heatmap, dtype=float)
            if np.any(self.heatmap < 0):
                raise DataError("heatmap values must be non-negative")


def raw_space_bpd(result_ll: float, norm, h: int, w: int, c: int) -> float:
    """Convert a normalized-space log-likelihood to raw-feature-space bpd."""
    ll_raw = result_ll - norm.log_std_sum(h, w)
    return -ll_raw / (LN2 * h * w * c)


def score_sample(
    model: MultiScaleModel,
    features: dict,
    solver_cfg: OdeSolverConfig | None = None,
    hutch_cfg: HutchinsonConfig | None = None,
    sample_id: str = "",
    label: str | None = None,
) -> AnomalyReport:
    """Score one sample given its per-scale feature tensors."""
    have = sorted(features)
    want = sorted(model.scale_ids)
    if have != want:
        raise ConfigError(f"feature scales {have} do not match model scales {want}")
    per_scale = {}
    nfe = {}
    for scale_id in model.scale_ids:
        ckpt = model.checkpoint(scale_id)
        ft = features[scale_id]
        if (ft.h, ft.w, ft.c) != (ckpt.h, ckpt.w, ckpt.c):
            raise ConfigError(
                f"scale {scale_id!r}: features are ({ft.h}, {ft.w}, {ft.c}), "
                f"checkpoint trained on ({ckpt.h}, {ckpt.w}, {ckpt.c})"
            )
        z = ckpt.norm.normalize_tensor(ft)
        res = log_likelihood(model.network(scale_id), model.sde, z, solver_cfg, hutch_cfg)
        per_scale[scale_id] = raw_space_bpd(res.log_likelihood, ckpt.norm, ft.h, ft.w, ft.c)
        nfe[scale_id] = res.n_function_evals
    return AnomalyReport(id=sample_id, per_scale_bpd=per_scale, label=label, nfe=nfe)


# ---------------------------------------------------------------------------
# decoder


@dataclass(frozen=True)
class DecoderConfig:
    """Which scales feed the decoder and the target image size."""

    image_size: int
    scale_ids: tuple | None = None  # None: largest-resolution scale only
    epochs: int = 1  # 0 returns the zero-initialized decoder

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "scale_ids": list(self.scale_ids) if self.scale_ids else None,
            "epochs": self.epochs,
        }


class LinearPatchDecoder:
    """Per-scale linear map from cell channels to a pixel patch."""

    def __init__(self, cfg: DecoderConfig, maps: dict):
        self.cfg = cfg
        self.maps = maps  # scale_id -> (weights (c+1, ph*pw), (h, w, ph, pw))

    @property
    def scale_ids(self) -> list:
        return list(self.maps)

    def decode(self, features: dict) -> np.ndarray:
        """Map per-scale features to one image, averaging decoded scales."""
        n = self.cfg.image_size
        acc = np.zeros((n, n))
        count = 0
        for scale_id, (weights, (h, w, ph, pw)) in self.maps.items():
            if scale_id not in features:
                raise ConfigError(f"decoder needs scale {scale_id!r}, not in features")
            ft = features[scale_id]
            if (ft.h, ft.w) != (h, w):
                raise ConfigError(
                    f"scale {scale_id!r}: decoder fitted on grid ({h}, {w}), "
                    f"got ({ft.h}, {ft.w})"
                )
            cells = ft.grid().reshape(h * w, ft.c)
            x = np.concatenate([cells, np.ones((h * w, 1))], axis=1)
            patches = (x @ weights).reshape(h, w, ph, pw)
            img = patches.transpose(0, 2, 1, 3).reshape(h * ph, w * pw)
            if img.shape != (n, n):
                img = _nearest_resize(img, n, n)
            acc += img
            count += 1
        return acc / count


def _nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    ys = np.minimum((np.arange(out_h) * img.shape[0]) // out_h, img.shape[0] - 1)
    xs = np.minimum((np.arange(out_w) * img.shape[1]) // out_w, img.shape[1] - 1)
    return img[np.ix_(ys, xs)]


def _largest_scale(sample_features: dict) -> str:
    return max(sample_features, key=lambda sid: sample_features[sid].h * sample_features[sid].w)


def train_decoder(dataset, cfg: DecoderConfig) -> LinearPatchDecoder:
    """Fit the linear patch decoder on (features, image) pairs by least squares.

    ``dataset`` is a list of ``(dict[scale_id -> FeatureTensor], image)``
    pairs from normal samples.  ``cfg.epochs == 0`` skips fitting and
    returns the zero-initialized decoder.  Least squares is the exact
    minimizer of the mean squared reconstruction error, so no iteration
    count or learning rate enters.
    """
    if not dataset:
        raise DataError("decoder training dataset is empty")
    first_feats, _ = dataset[0]
    scale_ids = cfg.scale_ids or (_largest_scale(first_feats),)

    maps = {}
    total_err = 0.0
    total_rows = 0
    for scale_id in scale_ids:
        if scale_id not in first_feats:
            raise ConfigError(f"decoder scale {scale_id!r} missing from features")
        h, w, c = (first_feats[scale_id].h, first_feats[scale_id].w, first_feats[scale_id].c)
        ph = max(1, round(cfg.image_size / h))
        pw = max(1, round(cfg.image_size / w))
        if cfg.epochs == 0:
            maps[scale_id] = (np.zeros((c + 1, ph * pw)), (h, w, ph, pw))
            continue
        xs, ys = [], []
        for feats, image in dataset:
            ft = feats[scale_id]
            cells = ft.grid().reshape(h * w, c)
            xs.append(np.concatenate([cells, np.ones((h * w, 1))], axis=1))
            target = np.asarray(image, dtype=float)
            if target.shape != (h * ph, w * pw):
                target = bilinear_resize(target, h * ph, w * pw)
            ys.append(
                target.reshape(h, ph, w, pw).transpose(0, 2, 1, 3).reshape(h * w, ph * pw)
            )
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        weights, *_ = np.linalg.lstsq(x, y, rcond=None)
        maps[scale_id] = (weights, (h, w, ph, pw))
        resid = x @ weights - y
        total_err += float(np.sum(resid * resid))
        total_rows += resid.size
    mse = total_err / total_rows if total_rows else 0.0
    log.info("decoder fitted on %d samples, train mse %.3e", len(dataset), mse)
    decoder = LinearPatchDecoder(cfg, maps)
    decoder.train_mse = mse
    return decoder


def localize(
    model: MultiScaleModel,
    decoder: LinearPatchDecoder,
    image,
    extractor,
    sampler_cfg: SamplerConfig,
    rng: np.random.Generator,
):
    """Reconstruct an image through feature partial-noising; return (x', heatmap).

    Only the decoder's scales are reconstructed.  Features travel:
    extract -> standardize -> noise/denoise -> de-standardize -> decode.
    """
    image = np.asarray(image, dtype=float)
    features = {ft.scale_id: ft for ft in extractor(image)}
    recon = {}
    for scale_id in decoder.scale_ids:
        if scale_id not in features:
            raise ConfigError(f"extractor produced no scale {scale_id!r}")
        ckpt = model.checkpoint(scale_id)
        ft = features[scale_id]
        z = ckpt.norm.normalize_tensor(ft)
        z_rec = reconstruct(model.network(scale_id), model.sde, z, sampler_cfg, rng)
        raw = ckpt.norm.invert(z_rec.reshape(-1, ft.c)).ravel()
        recon[scale_id] = FeatureTensor(scale_id, ft.h, ft.w, ft.c, raw)
    x_prime = decoder.decode(recon)
    if x_prime.shape != image.shape:
        raise ConfigError(
            f"decoded image is {x_prime.shape}, original is {image.shape}"
        )
    heatmap = (image - x_prime) ** 2
    return x_prime, heatmap


# ---------------------------------------------------------------------------
# ablation and report files


def scale_ablation(reports: list, subsets: list) -> list:
    """Re-evaluate detection metrics on subsets of the cached per-scale bpds.

    Likelihoods are never recomputed; each subset's anomaly score is the
    mean of the already-computed bpds of those scales.  Returns one row
    per subset: subset, auroc, f1, acc, threshold.
    """
    known = set(reports[0].per_scale_bpd) if reports else set()
    labels = []
    for r in reports:
        if r.label not in ("normal", "abnormal"):
            raise DataError(f"report {r.id!r} has no usable label")
        labels.append(1 if r.label == "abnormal" else 0)
    rows = []
    for subset in subsets:
        subset = tuple(subset)
        unknown = [s for s in subset if s not in known]
        if unknown:
            raise ConfigError(f"unknown scales in subset {subset}: {unknown}")
        scores = [np.mean([r.per_scale_bpd[s] for s in subset]) for r in reports]
        data = LabeledScores(scores=np.asarray(scores), labels=np.asarray(labels))
        a = auroc(data)
        f1, thr = best_f1(data)
        rows.append(
            {
                "subset": subset,
                "auroc": a,
                "f1": f1,
                "acc": accuracy_at(data, thr),
                "threshold": thr,
            }
        )
    return rows


def write_reports(path, reports: list) -> None:
    """One JSON record per line: id, per-scale bpd, score, label, nfe."""
    with open(path, "w") as fh:
        for r in reports:
            fh.write(
                json.dumps(
                    {
                        "id": r.id,
                        "per_scale_bpd": r.per_scale_bpd,
                        "score": r.score,
                        "label": r.label,
                        "nfe": r.nfe,
                    }
                )
            )
            fh.write("\n")


def read_reports(path) -> list:
    reports = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        reports.append(
            AnomalyReport(
                id=doc["id"],
                per_scale_bpd=doc["per_scale_bpd"],
                score=doc["score"],
                label=doc.get("label"),
                nfe=doc.get("nfe", {}),
            )
        )
    return reports
