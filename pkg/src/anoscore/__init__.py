"""Anomaly detection by diffusion-ODE density estimation.

Train score networks on normal feature vectors, compute exact per-sample
log-likelihoods through the deterministic density flow, aggregate
bits-per-dimension across scales into an anomaly score, and localize
anomalies via partial-noising reconstruction error.
"""

from .errors import (
    AnoScoreError,
    ConfigError,
    DataError,
    DomainError,
    FormatError,
    NumericalError,
    SolverError,
)
from .features import (
    DatasetManifest,
    FeatureTensor,
    ManifestSample,
    SyntheticSpec,
    analytic_bpd,
    extract_baseline,
    gen_synthetic,
    read_features,
    write_features,
)
from .likelihood import (
    HutchinsonConfig,
    LikelihoodResult,
    batch_log_likelihood,
    bpd,
    log_likelihood,
)
from .metrics import LabeledScores, accuracy_at, auroc, best_f1, export_roc_hist
from .nets import MlpScoreConfig, MlpScoreNet, NegativeIdentityScore, time_embedding
from .odeint import OdeSolverConfig
from .pipeline import (
    AnomalyReport,
    DecoderConfig,
    LinearPatchDecoder,
    MultiScaleModel,
    localize,
    scale_ablation,
    score_sample,
    train_decoder,
)
from .sampler import SamplerConfig, denoise, reconstruct
from .sde import GaussianScoreOracle, VpSdeConfig, prior_logpdf
from .training import (
    NormStats,
    ScoreModelCheckpoint,
    TrainConfig,
    fit_norm_stats,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
