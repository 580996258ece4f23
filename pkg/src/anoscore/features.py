"""Data layer: feature tensors, the ADFT binary format, manifests,
a self-contained baseline feature extractor, and synthetic datasets with
analytic ground truth.

ADFT file layout (all integers little-endian):

    magic   4 bytes  b"ADFT"
    version u32      1
    n_scales u32
    per scale:
        label_len u8, label UTF-8
        h u32, w u32, c u32
        h*w*c float32 values, row-major (h, then w, then c)

The format is deliberately dumb: parseable from any language in a few
lines, streaming-friendly, bit-exact on round trip.  Images and heatmaps
reuse it as single-channel grids.

Manifests are JSON with paths relative to the manifest file, so datasets
stay relocatable.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DomainError, FormatError

__all__ = [
    "FeatureTensor",
    "ManifestSample",
    "DatasetManifest",
    "SyntheticSpec",
    "write_features",
    "read_features",
    "write_image_grid",
    "read_image_grid",
    "bilinear_resize",
    "extract_baseline",
    "gen_synthetic",
    "render_blob_image",
    "insert_square",
    "GaussianMixtureOracle",
    "analytic_bpd",
]

_MAGIC = b"ADFT"
_VERSION = 1
_U32_MAX = 2**32 - 1

LABELS = ("normal", "abnormal", "unlabeled")


@dataclass
class FeatureTensor:
    """One scale's feature map as a flat float32 array.

    ``values`` has length ``h * w * c`` in row-major (h, w, c) order.
    """

    scale_id: str
    h: int
    w: int
    c: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).ravel()
        if self.values.size != self.h * self.w * self.c:
            raise DataError(
                f"scale {self.scale_id!r}: {self.values.size} values for dims "
                f"({self.h}, {self.w}, {self.c})"
            )
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"scale {self.scale_id!r}: non-finite feature values")

    @property
    def dim(self) -> int:
        return self.h * self.w * self.c

    def grid(self) -> np.ndarray:
        """View as an (h, w, c) float64 array."""
        return self.values.astype(np.float64).reshape(self.h, self.w, self.c)

    def flat(self) -> np.ndarray:
        """Flat float64 copy of the values."""
        return self.values.astype(np.float64)

    @classmethod
    def from_grid(cls, scale_id: str, grid) -> "FeatureTensor":
        grid = np.asarray(grid, dtype=np.float32)
        if grid.ndim == 2:
            grid = grid[:, :, None]
        h, w, c = grid.shape
        return cls(scale_id, h, w, c, grid.ravel())


# ---------------------------------------------------------------------------
# binary format


def write_features(path, tensors) -> None:
    """Write a list of tensors to one ADFT file."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(tensors))]
    for ft in tensors:
        label = ft.scale_id.encode("utf-8")
        if len(label) > 255:
            raise FormatError(f"scale label too long ({len(label)} bytes)")
        for dim in (ft.h, ft.w, ft.c):
            if not (0 < dim <= _U32_MAX):
                raise FormatError(f"dimension {dim} does not fit the format")
        if ft.h * ft.w * ft.c > _U32_MAX:
            raise FormatError(f"payload of scale {ft.scale_id!r} overflows the format")
        chunks.append(struct.pack("<B", len(label)))
        chunks.append(label)
        chunks.append(struct.pack("<III", ft.h, ft.w, ft.c))
        chunks.append(np.ascontiguousarray(ft.values, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.path}: truncated at offset {self.pos} "
                f"(wanted {n} more bytes, file has {len(self.data)})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def read_features(path) -> list[FeatureTensor]:
    """Read an ADFT file back into a list of tensors."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != _MAGIC:
        raise FormatError(f"{path}: bad magic, not an ADFT file")
    (version,) = struct.unpack("<I", r.take(4))
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported ADFT version {version}, expected {_VERSION}")
    (n_scales,) = struct.unpack("<I", r.take(4))
    out = []
    for _ in range(n_scales):
        (label_len,) = struct.unpack("<B", r.take(1))
        label = r.take(label_len).decode("utf-8")
        h, w, c = struct.unpack("<III", r.take(12))
        values = np.frombuffer(r.take(4 * h * w * c), dtype="<f4")
        out.append(FeatureTensor(label, h, w, c, values))
    return out


def write_image_grid(path, image) -> None:
    """Store a 2-D float array as a single-channel ADFT grid."""
    write_features(path, [FeatureTensor.from_grid("image", np.asarray(image))])


def read_image_grid(path) -> np.ndarray:
    tensors = read_features(path)
    if len(tensors) != 1 or tensors[0].c != 1:
        raise FormatError(f"{path}: expected a single-channel grid")
    return tensors[0].grid()[:, :, 0]


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestSample:
    id: str
    label: str
    features: str
    image: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise DataError(f"sample {self.id!r}: unknown label {self.label!r}")


@dataclass
class DatasetManifest:
    """List of samples with relative file references."""

    samples: list
    version: int = 1
    root: Path | None = None

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sample ids in manifest")

    def resolve(self, relpath: str) -> Path:
        if self.root is None:
            return Path(relpath)
        return self.root / relpath

    def features_for(self, sample: ManifestSample) -> list[FeatureTensor]:
        return read_features(self.resolve(sample.features))

    def image_for(self, sample: ManifestSample) -> np.ndarray:
        if sample.image is None:
            raise DataError(f"sample {sample.id!r} has no image reference")
        return read_image_grid(self.resolve(sample.image))

    def by_id(self, sample_id: str) -> ManifestSample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise DataError(f"no sample with id {sample_id!r} in manifest")

    def save(self, path) -> None:
        path = Path(path)
        doc = {
            "version": self.version,
            "samples": [
                {"id": s.id, "label": s.label, "features": s.features, "image": s.image}
                for s in self.samples
            ],
        }
        path.write_text(json.dumps(doc, indent=2))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read manifest {path}: {exc}") from exc
        if doc.get("version") != 1:
            raise FormatError(f"{path}: unsupported manifest version {doc.get('version')}")
        samples = [ManifestSample(**s) for s in doc["samples"]]
        manifest = cls(samples=samples, version=doc["version"], root=path.parent)
        for s in samples:
            for ref in (s.features, s.image):
                if ref is not None and not manifest.resolve(ref).exists():
                    raise DataError(f"manifest {path}: referenced file missing: {ref}")
        return manifest


# ---------------------------------------------------------------------------
# baseline extractor


def bilinear_resize(image, out_h: int, out_w: int) -> np.ndarray:
    """Center-aligned bilinear resize; identity when sizes already match."""
    image = np.asarray(image, dtype=float)
    in_h, in_w = image.shape
    if (in_h, in_w) == (out_h, out_w):
        return image.copy()

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    ylo, yhi, fy = axis_coords(in_h, out_h)
    xlo, xhi, fx = axis_coords(in_w, out_w)
    top = image[ylo][:, xlo] * (1 - fx) + image[ylo][:, xhi] * fx
    bot = image[yhi][:, xlo] * (1 - fx) + image[yhi][:, xhi] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


def extract_baseline(image, scales) -> list[FeatureTensor]:
    """Cheap deterministic multi-scale feature extractor.

    Per ``(resize_dim, p)`` scale the image is bilinearly resized to
    ``resize_dim`` squared and partitioned into a p-by-p grid of cells;
    each cell yields six channels: mean, population std, min, max, mean
    horizontal finite difference, mean vertical finite difference.  The
    mean channel alone is a p-by-p downsample of the image, which is what
    lets a linear decoder approximately invert the extraction.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.size == 0:
        raise DataError("extract_baseline expects a non-empty 2-D image")
    out = []
    for resize_dim, p in scales:
        if resize_dim % p != 0:
            raise ConfigError(f"grid {p} does not divide resize dim {resize_dim}")
        resized = bilinear_resize(image, resize_dim, resize_dim)
        cell = resize_dim // p
        # (p, p, cell, cell) view of the cells
        blocks = resized.reshape(p, cell, p, cell).transpose(0, 2, 1, 3)
        grid = np.empty((p, p, 6))
        grid[:, :, 0] = blocks.mean(axis=(2, 3))
        grid[:, :, 1] = blocks.std(axis=(2, 3))
        grid[:, :, 2] = blocks.min(axis=(2, 3))
        grid[:, :, 3] = blocks.max(axis=(2, 3))
        if cell > 1:
            grid[:, :, 4] = np.diff(blocks, axis=3).mean(axis=(2, 3))
            grid[:, :, 5] = np.diff(blocks, axis=2).mean(axis=(2, 3))
        else:
            grid[:, :, 4] = 0.0
            grid[:, :, 5] = 0.0
        out.append(FeatureTensor.from_grid(f"r{resize_dim}p{p}", grid))
    return out


# ---------------------------------------------------------------------------
# synthetic datasets


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic dataset with known ground truth.

    ``gaussian`` and ``gaussian_mixture`` draw feature vectors directly
    from a mixture law shared by all scales (the per-scale products of
    ``dims`` must agree; scales are independent draws).  Anomalies apply
    ``z -> scale_factor * z + shift`` to normal-law draws.  ``blob_images``
    renders smooth blob images, inserts a bright square as the anomaly and
    runs the baseline extractor; it has no tractable density, so its
    oracle is None.
    """

    kind: str
    dims: tuple = ((1, 1, 8),)
    means: tuple = (0.0,)
    stds: tuple = (1.0,)
    weights: tuple = (1.0,)
    shift: object = 0.0
    scale_factor: float = 1.0
    n_train: int = 128
    n_test_normal: int = 64
    n_test_abnormal: int = 64
    seed: int = 0
    image_size: int = 64
    extractor_scales: tuple = ((64, 8),)
    square_size: int = 16
    square_intensity: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "gaussian_mixture", "blob_images"):
            raise ConfigError(f"unknown synthetic kind {self.kind!r}")
        if self.kind != "blob_images":
            if abs(sum(self.weights) - 1.0) > 1e-9:
                raise ConfigError(f"mixture weights must sum to 1, got {self.weights}")
            if any(s <= 0 for s in self.stds):
                raise ConfigError(f"mixture stds must be positive, got {self.stds}")
            if len({int(np.prod(d)) for d in self.dims}) != 1:
                raise ConfigError(
                    f"all scales must share one flattened dim, got {self.dims}"
                )
            if not (len(self.means) == len(self.stds) == len(self.weights)):
                raise ConfigError("means, stds and weights must have equal length")

    @property
    def flat_dim(self) -> int:
        return int(np.prod(self.dims[0]))


class GaussianMixtureOracle:
    """Exact log-density of the normal law of a synthetic spec."""

    def __init__(self, means, stds, weights, dim: int):
        self.means = np.stack(
            [np.broadcast_to(np.asarray(m, dtype=float), (dim,)) for m in means]
        )
        self.stds = np.asarray(stds, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.dim = dim

    def logpdf(self, z) -> float:
        z = np.asarray(z, dtype=float).ravel()
        if z.size != self.dim:
            raise DataError(f"oracle expects dim {self.dim}, got {z.size}")
        comps = []
        for m, s, w in zip(self.means, self.stds, self.weights):
            sq = np.sum((z - m) ** 2) / (s * s)
            comps.append(
                math.log(w) - 0.5 * sq - 0.5 * self.dim * math.log(2 * math.pi * s * s)
            )
        comps = np.asarray(comps)
        peak = comps.max()
        return float(peak + math.log(np.sum(np.exp(comps - peak))))

    __call__ = logpdf

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(len(self.weights), p=self.weights)
        return self.means[k] + self.stds[k] * rng.standard_normal(self.dim)


def analytic_bpd(oracle, samples) -> float:
    """Mean ground-truth bits per dimension over samples from the oracle's law."""
    samples = [np.asarray(s, dtype=float).ravel() for s in samples]
    if not samples:
        raise DomainError("analytic_bpd needs at least one sample")
    total = 0.0
    for z in samples:
        total += -oracle.logpdf(z) / (math.log(2.0) * z.size)
    return total / len(samples)


def render_blob_image(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """One normal-class image: a few smooth Gaussian blobs, clipped to [0, 1]."""
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    image = np.zeros((n, n))
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.15 * n, 0.85 * n, size=2)
        sig = rng.uniform(n / 10, n / 5)
        amp = rng.uniform(0.3, 0.7)
        image += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
    return np.clip(image, 0.0, 1.0)


def insert_square(image: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator):
    """Insert the anomaly square; returns (image, (top, left, size))."""
    n = image.shape[0]
    s = spec.square_size
    top = int(rng.integers(n // 8, n - s - n // 8))
    left = int(rng.integers(n // 8, n - s - n // 8))
    out = image.copy()
    out[top : top + s, left : left + s] = spec.square_intensity
    return out, (top, left, s)


def gen_synthetic(spec: SyntheticSpec, out_dir):
    """Write a synthetic dataset and return (train, test, oracle).

    The train manifest holds normal samples only; the test manifest mixes
    normals with anomaly-transformed samples, labelled.  The oracle is the
    exact normal-law log-density, or None for blob images (no tractable
    density exists there).
    """
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    if spec.kind in ("gaussian", "gaussian_mixture"):
        oracle = GaussianMixtureOracle(spec.means, spec.stds, spec.weights, spec.flat_dim)
        shift = np.broadcast_to(np.asarray(spec.shift, dtype=float), (spec.flat_dim,))

        def emit(sample_id: str, label: str) -> ManifestSample:
            tensors = []
            for i, (h, w, c) in enumerate(spec.dims):
                z = oracle.sample(rng)
                if label == "abnormal":
                    z = spec.scale_factor * z + shift
                tensors.append(FeatureTensor(f"s{i}", h, w, c, z))
            rel = f"features/{sample_id}.adft"
            write_features(out_dir / rel, tensors)
            return ManifestSample(id=sample_id, label=label, features=rel)

        train = [emit(f"train-{i:05d}", "normal") for i in range(spec.n_train)]
        test = [emit(f"test-n-{i:05d}", "normal") for i in range(spec.n_test_normal)]
        test += [emit(f"test-a-{i:05d}", "abnormal") for i in range(spec.n_test_abnormal)]

    else:  # blob_images
        (out_dir / "images").mkdir(exist_ok=True)
        oracle = None

        def emit(sample_id: str, label: str) -> ManifestSample:
            image = render_blob_image(spec, rng)
            if label == "abnormal":
                image, _ = insert_square(image, spec, rng)
            tensors = extract_baseline(image, spec.extractor_scales)
            feat_rel = f"features/{sample_id}.adft"
            img_rel = f"images/{sample_id}.adft"
            write_features(out_dir / feat_rel, tensors)
            write_image_grid(out_dir / img_rel, image)
            return ManifestSample(id=sample_id, label=label, features=feat_rel, image=img_rel)

        train = [emit(f"train-{i:05d}", "normal") for i in range(spec.n_train)]
        test = [emit(f"test-n-{i:05d}", "normal") for i in range(spec.n_test_normal)]
        test += [emit(f"test-a-{i:05d}", "abnormal") for i in range(spec.n_test_abnormal)]

    train_manifest = DatasetManifest(samples=train, root=out_dir)
    test_manifest = DatasetManifest(samples=test, root=out_dir)
    train_manifest.save(out_dir / "train.json")
    test_manifest.save(out_dir / "test.json")
    return train_manifest, test_manifest, oracle
