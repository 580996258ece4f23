"""Export image folders to ADFT feature files plus a manifest.

Input layout: one subfolder per class under the input directory, e.g.
``input/normal/*.png`` and ``input/tumor/*.png``.  The subfolder named
"normal" maps to the normal label; every other subfolder is labelled
abnormal.  Images are converted to RGB (grayscale slices are replicated
across the three channels), resized to each configured scale with bilinear
interpolation, normalized with the backbone's pretraining statistics, and
forwarded to the configured block.  One ADFT file per image holds all
scales, labelled by input size ("256", "192", ...).

The manifest is the toolkit's JSON schema with an extra top-level
``exporter`` section recording provenance (backbone, layer, normalization)
so the consumer can audit how the features were produced.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .adft import read_adft, write_adft
from .backbone import IMAGENET_MEAN, IMAGENET_STD, BackboneFeatures

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass
class ExporterConfig:
    input_dir: str
    output_dir: str
    backbone: str = "efficientnet_b5"
    layer_index: int = 36
    scales: tuple = (256, 192, 128, 64)
    batch_size: int = 8
    weights: str = "pretrained"
    seed: int = 0
    normal_dir_name: str = "normal"

    def __post_init__(self):
        if not self.scales:
            raise ValueError("scale list must be non-empty")


def _load_image(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((size, size), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    mean = np.asarray(IMAGENET_MEAN, dtype=np.float32)
    std = np.asarray(IMAGENET_STD, dtype=np.float32)
    return ((arr - mean) / std).transpose(2, 0, 1)


def _collect_images(input_dir: Path):
    samples = []
    for class_dir in sorted(p for p in input_dir.iterdir() if p.is_dir()):
        for path in sorted(class_dir.iterdir()):
            if path.suffix.lower() in IMAGE_EXTENSIONS:
                samples.append((class_dir.name, path))
    return samples


def export(cfg: ExporterConfig) -> Path:
    """Run the export; returns the manifest path."""
    input_dir = Path(cfg.input_dir)
    if not input_dir.is_dir():
        raise FileNotFoundError(f"input directory not found: {input_dir}")
    out_dir = Path(cfg.output_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)

    backbone = BackboneFeatures(cfg.backbone, cfg.layer_index,
                                weights=cfg.weights, seed=cfg.seed)
    found = _collect_images(input_dir)
    if not found:
        raise FileNotFoundError(f"no images under {input_dir} (per-class subfolders)")

    entries = []  # (sample_id, label); unreadable images excluded
    per_scale_inputs = {size: [] for size in cfg.scales}
    for class_name, path in found:
        try:
            loaded = [_load_image(path, size) for size in cfg.scales]
        except Exception as exc:  # unreadable image: skip with a warning
            print(f"warning: skipping unreadable image {path}: {exc}", file=sys.stderr)
            continue
        label = "normal" if class_name == cfg.normal_dir_name else "abnormal"
        entries.append((f"{class_name}-{path.stem}", label))
        for size, arr in zip(cfg.scales, loaded):
            per_scale_inputs[size].append(arr)

    per_scale_feats = {}
    for size in cfg.scales:
        arrays = per_scale_inputs[size]
        outs = []
        for start in range(0, len(arrays), cfg.batch_size):
            outs.append(backbone.extract(np.stack(arrays[start : start + cfg.batch_size])))
        per_scale_feats[size] = np.concatenate(outs) if outs else np.empty((0,))

    manifest_samples = []
    for i, (sample_id, label) in enumerate(entries):
        scales_out = [(str(size), per_scale_feats[size][i]) for size in cfg.scales]
        rel = f"features/{sample_id}.adft"
        write_adft(out_dir / rel, scales_out)
        manifest_samples.append({"id": sample_id, "label": label,
                                 "features": rel, "image": None})

    manifest = {
        "version": 1,
        "samples": manifest_samples,
        "exporter": {
            "backbone": cfg.backbone,
            "layer_index": cfg.layer_index,
            "weights": cfg.weights,
            "scales": list(cfg.scales),
            "out_channels": backbone.out_channels,
            "input_normalization": {"mean": list(IMAGENET_MEAN), "std": list(IMAGENET_STD)},
        },
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    print(f"exported {len(manifest_samples)} samples to {out_dir}")
    return manifest_path


def verify(manifest_path) -> int:
    """Re-open every referenced file and check dims; returns violation count."""
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    meta = doc.get("exporter", {})
    scales = [str(s) for s in meta.get("scales", [])]
    channels = meta.get("out_channels")
    root = manifest_path.parent

    violations = 0
    counts = {}
    for sample in doc["samples"]:
        counts[sample["label"]] = counts.get(sample["label"], 0) + 1
        path = root / sample["features"]
        if not path.exists():
            print(f"violation: {sample['id']}: missing file {sample['features']}")
            violations += 1
            continue
        try:
            tensors = read_adft(path)
        except Exception as exc:
            print(f"violation: {sample['id']}: unreadable ADFT: {exc}")
            violations += 1
            continue
        labels = [label for label, _ in tensors]
        if scales and labels != scales:
            print(f"violation: {sample['id']}: scales {labels}, expected {scales}")
            violations += 1
            continue
        for label, grid in tensors:
            expected_hw = max(1, int(label) // 32)
            expected = (expected_hw, expected_hw, channels)
            if grid.shape != expected:
                print(f"violation: {sample['id']} scale {label}: dims {grid.shape}, "
                      f"expected {expected}")
                violations += 1
    for label in sorted(counts):
        print(f"{label}: {counts[label]} samples")
    print(f"violations: {violations}")
    return violations
