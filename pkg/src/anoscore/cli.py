"""Command-line entry point.

Subcommands: synth, train, score, eval, localize, ablate.  Options come
from a JSON config file plus repeatable ``--set section.key=value``
overrides; precedence is flags > file > defaults, and the effective
config is printed at startup.  Seeds are mandatory: density estimates
feed quantitative checks, so hidden wall-clock nondeterminism is not
allowed anywhere.

Exit codes: 0 success, 1 usage/config, 2 data or file format, 3 numerical.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .errors import (
    AnoScoreError,
    ConfigError,
    DataError,
    DomainError,
    FormatError,
    NumericalError,
)
from .features import (
    DatasetManifest,
    FeatureTensor,
    SyntheticSpec,
    extract_baseline,
    gen_synthetic,
    write_features,
)
from .likelihood import HutchinsonConfig
from .metrics import (
    LabeledScores,
    accuracy_at,
    auroc,
    best_f1,
    export_roc_hist,
    roc_points,
    score_histograms,
)
from .nets import MlpScoreConfig
from .odeint import OdeSolverConfig
from .pipeline import (
    DecoderConfig,
    MultiScaleModel,
    localize,
    scale_ablation,
    score_sample,
    train_decoder,
    write_reports,
    read_reports,
)
from .sampler import SamplerConfig
from .sde import VpSdeConfig
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

DEFAULTS = {
    "seed": None,
    "sde": {"beta_min": 0.1, "beta_max": 20.0, "t_min": 1e-5, "t_max": 1.0},
    "net": {"hidden_dims": [256, 256], "time_embed_dim": 64, "activation": "silu"},
    "train": {
        "epochs": 100,
        "batch_size": 128,
        "learning_rate": 1e-4,
        "lambda_weighting": "sigma_squared",
    },
    "solver": {"rtol": 1e-5, "atol": 1e-5, "max_steps": 100000, "initial_step": 1e-3},
    "hutchinson": {"probe_distribution": "rademacher", "n_probes": 1, "seed": None},
    "sampler": {"n_steps": 500, "snr": 0.16, "corrector_steps_per_predictor": 1, "t_start": 0.5},
    "extractor": {"scales": [[64, 8]]},
    "scales": None,
    "paths": {
        "manifest": None,
        "train_manifest": None,
        "checkpoint_dir": "checkpoints",
        "output_dir": "out",
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set needs key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = _merge(cfg, json.loads(path.read_text()))
    for assignment in getattr(args, "set", None) or []:
        _apply_set(cfg, assignment)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "manifest", None):
        cfg["paths"]["manifest"] = args.manifest
    if getattr(args, "checkpoint_dir", None):
        cfg["paths"]["checkpoint_dir"] = args.checkpoint_dir
    if getattr(args, "output_dir", None):
        cfg["paths"]["output_dir"] = args.output_dir
    if cfg["seed"] is None:
        raise ConfigError("seed is mandatory (config 'seed' or --seed)")
    print("config:", json.dumps(cfg, sort_keys=True))
    return cfg


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _derived_seed_str(text: str) -> int:
    import hashlib

    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=4).digest(), "little")


def _manifest(cfg: dict, key: str = "manifest") -> DatasetManifest:
    path = cfg["paths"].get(key)
    if not path:
        raise ConfigError(f"paths.{key} is not configured")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    return DatasetManifest.load(path)


def _scale_groups(manifest: DatasetManifest, wanted) -> dict:
    """scale_id -> list of FeatureTensor over the manifest's samples."""
    groups = {}
    for sample in manifest.samples:
        for ft in manifest.features_for(sample):
            if wanted is None or ft.scale_id in wanted:
                groups.setdefault(ft.scale_id, []).append(ft)
    if wanted:
        missing = [s for s in wanted if s not in groups]
        if missing:
            raise ConfigError(f"scales {missing} not present in manifest")
    return groups


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    def parse_json_flag(text, default):
        if text is None:
            return default
        return json.loads(text)

    dims = tuple(tuple(d) for d in parse_json_flag(args.dims, [[1, 1, 8]]))
    spec = SyntheticSpec(
        kind=args.kind,
        dims=dims,
        means=tuple(parse_json_flag(args.means, [0.0])),
        stds=tuple(parse_json_flag(args.stds, [1.0])),
        weights=tuple(parse_json_flag(args.weights, [1.0])),
        shift=parse_json_flag(args.shift, 0.0),
        scale_factor=args.scale_factor,
        n_train=args.n_train,
        n_test_normal=args.n_test_normal,
        n_test_abnormal=args.n_test_abnormal,
        seed=args.seed,
        image_size=args.image_size,
        extractor_scales=tuple(tuple(s) for s in parse_json_flag(args.extractor_scales, [[64, 8]])),
    )
    train_m, test_m, oracle = gen_synthetic(spec, args.out)
    def counts(m):
        per = {}
        for s in m.samples:
            per[s.label] = per.get(s.label, 0) + 1
        return per

    print(f"train: {counts(train_m)}  test: {counts(test_m)}")
    print(f"analytic oracle: {'yes' if oracle is not None else 'no'}")
    print(f"wrote {args.out}/train.json and {args.out}/test.json")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    manifest = _manifest(cfg, "manifest")
    bad = [s.id for s in manifest.samples if s.label != "normal"]
    if bad:
        raise DataError(f"training manifest must contain normal samples only, got {bad[:5]}")
    groups = _scale_groups(manifest, cfg["scales"])
    ckpt_dir = Path(cfg["paths"]["checkpoint_dir"])
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    sde = VpSdeConfig.from_dict(cfg["sde"])

    for index, scale_id in enumerate(sorted(groups)):
        tensors = groups[scale_id]
        net_cfg = MlpScoreConfig(
            input_dim=tensors[0].dim,
            hidden_dims=tuple(cfg["net"]["hidden_dims"]),
            time_embed_dim=cfg["net"]["time_embed_dim"],
            activation=cfg["net"]["activation"],
        )
        train_cfg = TrainConfig(seed=_derived_seed(cfg["seed"], index), **cfg["train"])
        progress = None
        if args.progress:
            def progress(step, loss, wall, _sid=scale_id):
                print(json.dumps({"scale": _sid, "step": step, "loss": loss,
                                  "wall_time_s": round(wall, 3)}))
        ckpt = train(tensors, sde, net_cfg, train_cfg, progress=progress)
        out = ckpt_dir / f"{scale_id}.ckpt"
        save_checkpoint(ckpt, out)
        print(f"scale {scale_id}: {len(tensors)} samples, "
              f"final loss {ckpt.metadata['final_loss']}, saved {out}")
    return 0


def _load_model(cfg: dict, scale_ids) -> MultiScaleModel:
    ckpt_dir = Path(cfg["paths"]["checkpoint_dir"])
    checkpoints = []
    missing = []
    for scale_id in scale_ids:
        path = ckpt_dir / f"{scale_id}.ckpt"
        if not path.exists():
            missing.append(scale_id)
        else:
            checkpoints.append(load_checkpoint(path))
    if missing:
        raise ConfigError(
            f"no checkpoint for scales {missing} in {ckpt_dir} "
            f"(manifest scales: {sorted(scale_ids)})"
        )
    return MultiScaleModel(checkpoints)


def cmd_score(args) -> int:
    cfg = load_config(args)
    manifest = _manifest(cfg, "manifest")
    first_scales = [ft.scale_id for ft in manifest.features_for(manifest.samples[0])]
    scale_ids = cfg["scales"] or sorted(first_scales)
    model = _load_model(cfg, scale_ids)
    solver_cfg = OdeSolverConfig.from_dict(cfg["solver"])
    hutch = dict(cfg["hutchinson"])
    if hutch.get("seed") is None:
        hutch["seed"] = cfg["seed"]
    hutch_cfg = HutchinsonConfig.from_dict(hutch)

    out_dir = Path(cfg["paths"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for sample in manifest.samples:
        features = {
            ft.scale_id: ft
            for ft in manifest.features_for(sample)
            if ft.scale_id in scale_ids
        }
        reports.append(
            score_sample(model, features, solver_cfg, hutch_cfg,
                         sample_id=sample.id, label=sample.label)
        )
    report_path = out_dir / "report.jsonl"
    write_reports(report_path, reports)
    scores = np.asarray([r.score for r in reports])
    print(f"scored {len(reports)} samples over scales {scale_ids}")
    print(f"score range [{scores.min():.4f}, {scores.max():.4f}], wrote {report_path}")
    return 0


def _labeled_scores(reports) -> LabeledScores:
    labels = []
    for r in reports:
        if r.label not in ("normal", "abnormal"):
            raise DomainError(f"report {r.id!r} lacks a normal/abnormal label")
        labels.append(1 if r.label == "abnormal" else 0)
    return LabeledScores(
        scores=np.asarray([r.score for r in reports]), labels=np.asarray(labels)
    )


def _parse_subsets(text: str, known) -> list:
    if text == "auto":
        singles = [[s] for s in sorted(known)]
        return singles + [sorted(known)]
    return [part.split(",") for part in text.split(";") if part]


def _run_ablation(reports, subsets_text: str, out_dir: Path) -> None:
    known = reports[0].per_scale_bpd.keys()
    rows = scale_ablation(reports, _parse_subsets(subsets_text, known))
    path = out_dir / "ablation.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subset", "auroc", "f1", "acc", "threshold"])
        for r in rows:
            writer.writerow(["+".join(r["subset"]), r["auroc"], r["f1"], r["acc"], r["threshold"]])
    plotting.plot_ablation(rows, out_dir / "ablation.png")
    for r in rows:
        print(f"subset {'+'.join(r['subset']):24s} AUROC {r['auroc']:.4f} "
              f"F1 {r['f1']:.4f} ACC {r['acc']:.4f}")
    print(f"wrote {path}")


def cmd_eval(args) -> int:
    reports = read_reports(args.report)
    data = _labeled_scores(reports)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    a = auroc(data)
    f1, thr = best_f1(data)
    acc = accuracy_at(data, thr)
    metrics = {"auroc": a, "f1": f1, "acc": acc, "threshold": thr,
               "n_normal": int(np.sum(data.labels == 0)),
               "n_abnormal": int(np.sum(data.labels == 1))}
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2))
    export_roc_hist(data, out_dir)
    plotting.plot_roc(roc_points(data), a, out_dir / "roc.png")
    edges, normal, abnormal = score_histograms(data)
    plotting.plot_score_hist(edges, normal, abnormal, out_dir / "score_hist.png")
    print(f"AUROC {a:.4f}  F1 {f1:.4f}  ACC {acc:.4f}  (threshold {thr:.6g})")
    if args.ablate:
        _run_ablation(reports, args.ablate, out_dir)
    print(f"wrote {out_dir}/metrics.json, roc.csv, score_hist.csv and figures")
    return 0


def cmd_ablate(args) -> int:
    reports = read_reports(args.report)
    _labeled_scores(reports)  # label validation
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _run_ablation(reports, args.subsets, out_dir)
    return 0


def cmd_localize(args) -> int:
    cfg = load_config(args)
    score_manifest = _manifest(cfg, "manifest")
    train_manifest = _manifest(cfg, "train_manifest")
    scales = [tuple(s) for s in cfg["extractor"]["scales"]]

    decoder_dataset = []
    for sample in train_manifest.samples:
        feats = {ft.scale_id: ft for ft in train_manifest.features_for(sample)}
        decoder_dataset.append((feats, train_manifest.image_for(sample)))
    image_size = decoder_dataset[0][1].shape[0]
    decoder_scales = tuple(cfg["scales"]) if cfg["scales"] else None
    decoder = train_decoder(decoder_dataset, DecoderConfig(image_size=image_size,
                                                           scale_ids=decoder_scales))
    model = _load_model(cfg, decoder.scale_ids)

    t_starts = [float(x) for x in str(args.t_start).split(",")]
    sample_ids = args.ids.split(",") if args.ids else [s.id for s in score_manifest.samples]
    out_dir = Path(cfg["paths"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    def extractor(image):
        return extract_baseline(image, scales)

    base_sampler = SamplerConfig.from_dict(cfg["sampler"])
    for sample_id in sample_ids:
        sample = score_manifest.by_id(sample_id)
        image = score_manifest.image_for(sample)
        for t_start in t_starts:
            sampler_cfg = SamplerConfig(
                n_steps=base_sampler.n_steps,
                snr=base_sampler.snr,
                corrector_steps_per_predictor=base_sampler.corrector_steps_per_predictor,
                t_start=t_start,
            )
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg["seed"], _derived_seed_str(sample_id),
                                        int(round(t_start * 1e6))])
            )
            recon, heatmap = localize(model, decoder, image, extractor, sampler_cfg, rng)
            tag = f"{sample_id}_t{t_start:g}"
            write_features(out_dir / f"heatmap_{tag}.adft",
                           [FeatureTensor.from_grid("heatmap", heatmap)])
            write_features(out_dir / f"recon_{tag}.adft",
                           [FeatureTensor.from_grid("image", recon)])
            plotting.plot_heatmap_panel(image, recon, heatmap,
                                        out_dir / f"panel_{tag}.png",
                                        title=f"{sample_id} (t*={t_start:g})")
            print(f"{sample_id} t*={t_start:g}: heatmap max {heatmap.max():.4f}, "
                  f"mean {heatmap.mean():.5f}")
    print(f"wrote heatmaps and panels under {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry (dotted path, JSON value)")
    p.add_argument("--seed", type=int, help="global seed (mandatory via flag or config)")
    p.add_argument("--manifest", help="dataset manifest path")
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.add_argument("--output-dir", dest="output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anoscore",
                     description="diffusion-ODE density anomaly detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", required=True,
                   choices=["gaussian", "gaussian_mixture", "blob_images"])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dims", help='JSON, e.g. "[[1,1,8],[2,2,2]]"')
    p.add_argument("--means", help='JSON, e.g. "[[1,0,0,0,0,0,0,0],[-1,0,0,0,0,0,0,0]]"')
    p.add_argument("--stds", help='JSON, e.g. "[1,1]"')
    p.add_argument("--weights", help='JSON, e.g. "[0.5,0.5]"')
    p.add_argument("--shift", help="anomaly mean shift (JSON scalar or vector)")
    p.add_argument("--scale-factor", type=float, default=1.0)
    p.add_argument("--n-train", type=int, default=128)
    p.add_argument("--n-test-normal", type=int, default=64)
    p.add_argument("--n-test-abnormal", type=int, default=64)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--extractor-scales", help='JSON, e.g. "[[64,8]]"')
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one score model per scale")
    _add_config_flags(p)
    p.add_argument("--progress", action="store_true",
                   help="emit one JSON line per training step")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="write an anomaly report for a manifest")
    _add_config_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="detection metrics + ROC/histogram exports")
    p.add_argument("--report", required=True, help="report.jsonl from 'score'")
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", metavar="SUBSETS",
                   help="also run scale ablation ('auto' or 's0;s1;s0,s1')")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("localize", help="reconstruction heatmaps for samples")
    _add_config_flags(p)
    p.add_argument("--ids", help="comma-separated sample ids (default: all)")
    p.add_argument("--t-start", dest="t_start", default="0.5",
                   help="noise endpoint(s), comma separated for a sweep")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("ablate", help="scale-subset metrics from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--subsets", default="auto",
                   help="'auto' or semicolon-separated comma lists, e.g. 's0;s1;s0,s1'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, DomainError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except AnoScoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
