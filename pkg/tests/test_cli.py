import json
from pathlib import Path

import numpy as np
import pytest

from anoscore.cli import main
from anoscore.features import DatasetManifest, read_features
from anoscore.pipeline import read_reports


def run(argv, capsys=None):
    code = main(argv)
    out = capsys.readouterr() if capsys else None
    return code, out


def synth_gaussian(out_dir, seed=0, dims="[[1,1,2]]", extra=()):
    return main(
        [
            "synth", "--out", str(out_dir), "--kind", "gaussian",
            "--seed", str(seed), "--dims", dims,
            "--n-train", "24", "--n-test-normal", "6", "--n-test-abnormal", "6",
            "--shift", "3.0", *extra,
        ]
    )


def small_cfg(ws, manifest, extra=None):
    cfg = {
        "seed": 7,
        "net": {"hidden_dims": [8], "time_embed_dim": 4, "activation": "silu"},
        "train": {"epochs": 2, "batch_size": 8, "learning_rate": 1e-4,
                  "lambda_weighting": "sigma_squared"},
        "paths": {
            "manifest": str(manifest),
            "checkpoint_dir": str(ws / "ckpts"),
            "output_dir": str(ws / "out"),
        },
    }
    if extra:
        cfg.update(extra)
    path = ws / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def dir_bytes(root):
    root = Path(root)
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


# ---------------------------------------------------------------------------
# synth


def test_synth_train_manifest_all_normal(tmp_path, capsys):
    assert synth_gaussian(tmp_path / "ds") == 0
    out = capsys.readouterr().out
    assert "normal" in out
    manifest = DatasetManifest.load(tmp_path / "ds" / "train.json")
    assert all(s.label == "normal" for s in manifest.samples)


def test_synth_reproducible_byte_for_byte(tmp_path):
    synth_gaussian(tmp_path / "a", seed=5)
    synth_gaussian(tmp_path / "b", seed=5)
    assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")
    synth_gaussian(tmp_path / "c", seed=6)
    assert dir_bytes(tmp_path / "a") != dir_bytes(tmp_path / "c")


def test_synth_blob_images(tmp_path):
    code = main(
        ["synth", "--out", str(tmp_path / "ds"), "--kind", "blob_images",
         "--seed", "1", "--n-train", "4", "--n-test-normal", "2",
         "--n-test-abnormal", "2", "--image-size", "32",
         "--extractor-scales", "[[32,4]]"]
    )
    assert code == 0
    manifest = DatasetManifest.load(tmp_path / "ds" / "train.json")
    ft = manifest.features_for(manifest.samples[0])[0]
    assert (ft.h, ft.w, ft.c) == (4, 4, 6)
    assert manifest.samples[0].image is not None


# ---------------------------------------------------------------------------
# train


def test_train_writes_checkpoints(tmp_path, capsys):
    synth_gaussian(tmp_path / "ds")
    cfg = small_cfg(tmp_path, tmp_path / "ds" / "train.json")
    capsys.readouterr()
    code = main(["train", "--config", str(cfg)])
    assert code == 0
    assert (tmp_path / "ckpts" / "s0.ckpt").exists()
    out = capsys.readouterr().out
    assert out.startswith("config:")  # effective config printed at startup


def test_train_zero_epochs_valid_checkpoint(tmp_path):
    synth_gaussian(tmp_path / "ds")
    cfg = small_cfg(tmp_path, tmp_path / "ds" / "train.json",
                    extra={"train": {"epochs": 0, "batch_size": 8}})
    assert main(["train", "--config", str(cfg)]) == 0
    from anoscore.training import load_checkpoint

    ckpt = load_checkpoint(tmp_path / "ckpts" / "s0.ckpt")
    assert ckpt.metadata["steps"] == 0


def test_train_missing_manifest_exit_code(tmp_path, capsys):
    cfg = small_cfg(tmp_path, tmp_path / "nope.json")
    code = main(["train", "--config", str(cfg)])
    assert code == 1
    assert "nope.json" in capsys.readouterr().err


def test_train_requires_seed(tmp_path, capsys):
    synth_gaussian(tmp_path / "ds")
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"paths": {"manifest": str(tmp_path / "ds/train.json")}}))
    code = main(["train", "--config", str(cfg_path)])
    assert code == 1
    assert "seed" in capsys.readouterr().err


def test_train_progress_lines(tmp_path, capsys):
    synth_gaussian(tmp_path / "ds")
    cfg = small_cfg(tmp_path, tmp_path / "ds" / "train.json")
    main(["train", "--config", str(cfg), "--progress"])
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("{")]
    recs = [json.loads(l) for l in lines]
    assert recs and {"scale", "step", "loss", "wall_time_s"} <= set(recs[0])
    assert recs[-1]["step"] == len(recs)


def test_train_rejects_abnormal_samples(tmp_path, capsys):
    synth_gaussian(tmp_path / "ds")
    cfg = small_cfg(tmp_path, tmp_path / "ds" / "test.json")  # has anomalies
    assert main(["train", "--config", str(cfg)]) == 2


# ---------------------------------------------------------------------------
# score


def scored_workspace(tmp_path, dims="[[1,1,2]]"):
    synth_gaussian(tmp_path / "ds", dims=dims)
    cfg = small_cfg(tmp_path, tmp_path / "ds" / "train.json")
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["score", "--config", str(cfg), "--manifest",
                 str(tmp_path / "ds" / "test.json")]) == 0
    return cfg, tmp_path / "out" / "report.jsonl"


def test_score_writes_report(tmp_path):
    _, report = scored_workspace(tmp_path)
    reports = read_reports(report)
    assert len(reports) == 12
    assert all(np.isfinite(r.score) for r in reports)
    single = reports[0]
    assert single.score == pytest.approx(single.per_scale_bpd["s0"])


def test_score_rerun_identical(tmp_path):
    cfg, report = scored_workspace(tmp_path)
    first = report.read_bytes()
    assert main(["score", "--config", str(cfg), "--manifest",
                 str(tmp_path / "ds" / "test.json")]) == 0
    assert report.read_bytes() == first


def test_score_missing_checkpoint_lists_scale(tmp_path, capsys):
    synth_gaussian(tmp_path / "ds", dims="[[1,1,2],[2,1,1]]")
    cfg = small_cfg(tmp_path, tmp_path / "ds" / "train.json", extra={"scales": ["s0"]})
    assert main(["train", "--config", str(cfg)]) == 0
    cfg2 = small_cfg(tmp_path, tmp_path / "ds" / "train.json")
    code = main(["score", "--config", str(cfg2), "--manifest",
                 str(tmp_path / "ds" / "test.json")])
    assert code == 1
    assert "s1" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval / ablate


def test_eval_outputs(tmp_path, capsys):
    _, report = scored_workspace(tmp_path)
    out_dir = tmp_path / "eval"
    assert main(["eval", "--report", str(report), "--out", str(out_dir)]) == 0
    printed = capsys.readouterr().out
    assert "AUROC" in printed
    metrics = json.loads((out_dir / "metrics.json").read_text())
    assert set(metrics) >= {"auroc", "f1", "acc", "threshold"}
    for name in ("roc.csv", "score_hist.csv", "roc.png", "score_hist.png"):
        assert (out_dir / name).exists()


def test_eval_perfect_separation_prints_auroc_one(tmp_path, capsys):
    report = tmp_path / "r.jsonl"
    with open(report, "w") as fh:
        for i, (s, label) in enumerate([(1.0, "normal"), (2.0, "normal"),
                                        (5.0, "abnormal"), (6.0, "abnormal")]):
            fh.write(json.dumps({"id": f"x{i}", "per_scale_bpd": {"s0": s},
                                 "score": s, "label": label, "nfe": {}}) + "\n")
    assert main(["eval", "--report", str(report), "--out", str(tmp_path / "e")]) == 0
    assert "AUROC 1.0000" in capsys.readouterr().out


def test_eval_missing_labels_is_domain_error(tmp_path, capsys):
    report = tmp_path / "r.jsonl"
    with open(report, "w") as fh:
        fh.write(json.dumps({"id": "x", "per_scale_bpd": {"s0": 1.0},
                             "score": 1.0, "label": None, "nfe": {}}) + "\n")
    assert main(["eval", "--report", str(report), "--out", str(tmp_path / "e")]) == 2


def test_eval_with_ablation_flag(tmp_path):
    _, report = scored_workspace(tmp_path, dims="[[1,1,2],[2,1,1]]")
    out_dir = tmp_path / "eval"
    assert main(["eval", "--report", str(report), "--out", str(out_dir),
                 "--ablate", "auto"]) == 0
    text = (out_dir / "ablation.csv").read_text()
    assert "s0+s1" in text and (out_dir / "ablation.png").exists()


def test_ablate_subcommand(tmp_path, capsys):
    _, report = scored_workspace(tmp_path, dims="[[1,1,2],[2,1,1]]")
    out_dir = tmp_path / "ab"
    assert main(["ablate", "--report", str(report), "--subsets", "s0;s1;s0,s1",
                 "--out", str(out_dir)]) == 0
    lines = (out_dir / "ablation.csv").read_text().splitlines()
    assert len(lines) == 4  # header + 3 subsets


def test_ablate_unknown_scale(tmp_path, capsys):
    _, report = scored_workspace(tmp_path)
    code = main(["ablate", "--report", str(report), "--subsets", "bogus",
                 "--out", str(tmp_path / "ab")])
    assert code == 1
    assert "bogus" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# localize


def blob_workspace(tmp_path):
    assert main(
        ["synth", "--out", str(tmp_path / "ds"), "--kind", "blob_images",
         "--seed", "2", "--n-train", "8", "--n-test-normal", "2",
         "--n-test-abnormal", "2", "--image-size", "32",
         "--extractor-scales", "[[32,4]]"]
    ) == 0
    cfg = {
        "seed": 3,
        "net": {"hidden_dims": [16], "time_embed_dim": 8, "activation": "silu"},
        "train": {"epochs": 2, "batch_size": 8, "learning_rate": 1e-4,
                  "lambda_weighting": "sigma_squared"},
        "sampler": {"n_steps": 50, "snr": 0.16,
                    "corrector_steps_per_predictor": 1, "t_start": 0.3},
        "extractor": {"scales": [[32, 4]]},
        "paths": {
            "manifest": str(tmp_path / "ds" / "test.json"),
            "train_manifest": str(tmp_path / "ds" / "train.json"),
            "checkpoint_dir": str(tmp_path / "ckpts"),
            "output_dir": str(tmp_path / "out"),
        },
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    train_cfg = tmp_path / "train_config.json"
    doc = json.loads(cfg_path.read_text())
    doc["paths"]["manifest"] = str(tmp_path / "ds" / "train.json")
    train_cfg.write_text(json.dumps(doc))
    assert main(["train", "--config", str(train_cfg)]) == 0
    return cfg_path


def test_localize_sweep_emits_one_heatmap_per_t(tmp_path):
    cfg = blob_workspace(tmp_path)
    sample = "test-a-00000"
    assert main(["localize", "--config", str(cfg), "--ids", sample,
                 "--t-start", "0.1,0.3,0.5"]) == 0
    out = tmp_path / "out"
    for t in ("0.1", "0.3", "0.5"):
        assert (out / f"heatmap_{sample}_t{t}.adft").exists()
        assert (out / f"panel_{sample}_t{t}.png").exists()
    heat = read_features(out / f"heatmap_{sample}_t0.3.adft")[0]
    assert heat.scale_id == "heatmap"
    assert np.all(heat.values >= 0)


def test_localize_identity_near_zero_heatmap(tmp_path):
    cfg = blob_workspace(tmp_path)
    sample = "test-n-00000"
    assert main(["localize", "--config", str(cfg), "--ids", sample,
                 "--t-start", "1e-5"]) == 0
    heat = read_features(tmp_path / "out" / f"heatmap_{sample}_t1e-05.adft")[0]
    # with no noising, the error is the linear decoder's residual only
    assert float(np.mean(heat.values)) < 0.01


def test_localize_unknown_id(tmp_path, capsys):
    cfg = blob_workspace(tmp_path)
    code = main(["localize", "--config", str(cfg), "--ids", "ghost"])
    assert code == 2
    assert "ghost" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# usage / overrides


def test_usage_error_exit_code_is_one(capsys):
    # argparse-level usage error (missing required option) exits 1, not 2
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--out", "somewhere"])  # --report is required
    assert exc.value.code == 1
    # config-level usage problems return 1 without raising
    assert main(["score"]) == 1


def test_unknown_subcommand_exits_one():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_numerical_failure_exit_code_is_three(tmp_path, capsys):
    synth_gaussian(tmp_path / "ds")
    cfg = small_cfg(tmp_path, tmp_path / "ds" / "train.json")
    assert main(["train", "--config", str(cfg)]) == 0
    # an absurd step budget exhausts the solver mid-integration
    code = main(["score", "--config", str(cfg),
                 "--manifest", str(tmp_path / "ds" / "test.json"),
                 "--set", "solver.max_steps=3", "--set", "solver.initial_step=1e-9"])
    assert code == 3
    assert "step" in capsys.readouterr().err


def test_set_overrides_config_file(tmp_path, capsys):
    synth_gaussian(tmp_path / "ds")
    cfg = small_cfg(tmp_path, tmp_path / "ds" / "train.json")
    assert main(["train", "--config", str(cfg), "--set", "train.epochs=1",
                 "--set", "seed=99"]) == 0
    printed = capsys.readouterr().out
    line = next(l for l in printed.splitlines() if l.startswith("config:"))
    effective = json.loads(line.removeprefix("config: "))
    assert effective["train"]["epochs"] == 1
    assert effective["seed"] == 99
