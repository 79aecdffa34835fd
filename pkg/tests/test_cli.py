"""End-to-end command-line workflows on temp directories."""

import json
import subprocess
import sys

import numpy as np
import pytest

from embtrack.cli import run_cli
from embtrack.core import TrackerConfig
from embtrack.formats import load_checkpoint, save_config, save_matcher
from embtrack.matcher import MatcherParams


def simulate_args(out_dir, **kw):
    args = [
        "simulate",
        "--out", str(out_dir),
        "--objects", str(kw.get("objects", 6)),
        "--frames", str(kw.get("frames", 40)),
        "--embed-dim", str(kw.get("embed_dim", 16)),
        "--embed-noise", str(kw.get("embed_noise", 0.03)),
        "--seed", str(kw.get("seed", 5)),
    ]
    return args


class TestSimulate:
    def test_writes_dataset_files(self, tmp_path, capsys):
        out = tmp_path / "data"
        assert run_cli(simulate_args(out)) == 0
        for name in ("gt.txt", "det.txt", "labels.txt", "emb.bin", "scenario.json"):
            assert (out / name).exists(), name
        msg = capsys.readouterr().out
        assert "6 objects" in msg and "40 frames" in msg

    def test_deterministic_under_seed(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli(simulate_args(a)) == 0
        assert run_cli(simulate_args(b)) == 0
        for name in ("gt.txt", "det.txt", "labels.txt", "emb.bin", "scenario.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_scenario_config_file(self, tmp_path, capsys):
        cfg_path = tmp_path / "scenario.json"
        cfg_path.write_text(json.dumps({"n_objects": 3, "n_frames": 8, "embed_dim": 4}))
        out = tmp_path / "data"
        code = run_cli(["simulate", "--out", str(out),
                        "--scenario-config", str(cfg_path), "--seed", "9"])
        assert code == 0
        saved = json.loads((out / "scenario.json").read_text())
        assert saved["n_objects"] == 3
        assert saved["seed"] == 9

    def test_unknown_scenario_key_fails(self, tmp_path, capsys):
        cfg_path = tmp_path / "scenario.json"
        cfg_path.write_text(json.dumps({"objects": 3}))
        code = run_cli(["simulate", "--out", str(tmp_path / "d"),
                        "--scenario-config", str(cfg_path)])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("error:") and "objects" in err


class TestPipeline:
    def test_simulate_train_track_evaluate(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert run_cli(simulate_args(data)) == 0

        ckpt = tmp_path / "matcher.ckpt"
        code = run_cli([
            "train-matcher",
            "--labels", str(data / "labels.txt"),
            "--emb", str(data / "emb.bin"),
            "--out", str(ckpt),
            "--epochs", "20",
            "--seed", "1",
        ])
        assert code == 0
        out = capsys.readouterr().out
        assert "pair accuracy" in out
        assert load_checkpoint(ckpt)["matcher"] is not None

        results = tmp_path / "results.txt"
        code = run_cli([
            "track",
            "--det", str(data / "det.txt"),
            "--emb", str(data / "emb.bin"),
            "--checkpoint", str(ckpt),
            "--out", str(results),
        ])
        assert code == 0
        out = capsys.readouterr().out
        assert "6 identities" in out

        metrics_json = tmp_path / "metrics.json"
        code = run_cli([
            "evaluate",
            "--gt", str(data / "gt.txt"),
            "--results", str(results),
            "--json", str(metrics_json),
        ])
        assert code == 0
        report = capsys.readouterr().out
        assert "MOTA" in report and "results" in report
        metrics = json.loads(metrics_json.read_text())
        assert metrics["mota"] == 1.0
        assert metrics["ids"] == 0
        assert metrics["idf1"] == 1.0

    def test_track_is_deterministic(self, tmp_path):
        data = tmp_path / "data"
        assert run_cli(simulate_args(data, objects=4, frames=15)) == 0
        ckpt = tmp_path / "m.ckpt"
        rng = np.random.default_rng(0)
        save_matcher(ckpt, MatcherParams.create(embed_dim=16, hidden=(16, 8, 4), rng=rng))
        outs = []
        for name in ("r1.txt", "r2.txt"):
            path = tmp_path / name
            assert run_cli(["track", "--det", str(data / "det.txt"),
                            "--emb", str(data / "emb.bin"),
                            "--checkpoint", str(ckpt), "--out", str(path)]) == 0
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_geometry_only_tracking(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert run_cli(simulate_args(data, objects=4, frames=15)) == 0
        results = tmp_path / "geo.txt"
        cfg = tmp_path / "cfg.json"
        save_config(cfg, TrackerConfig(iou_second_stage=True, similarity_threshold=0.9))
        code = run_cli(["track", "--det", str(data / "det.txt"),
                        "--out", str(results), "--config", str(cfg)])
        assert code == 0
        metrics_json = tmp_path / "geo.json"
        assert run_cli(["evaluate", "--gt", str(data / "gt.txt"),
                        "--results", str(results), "--json", str(metrics_json)]) == 0
        capsys.readouterr()
        assert json.loads(metrics_json.read_text())["mota"] == 1.0

    def test_train_lstm_and_track_with_it(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert run_cli(simulate_args(data, objects=4, frames=30)) == 0
        mckpt = tmp_path / "motion.ckpt"
        code = run_cli([
            "train-lstm",
            "--gt", str(data / "gt.txt"),
            "--out", str(mckpt),
            "--hidden", "8",
            "--horizon", "2",
            "--epochs", "2",
            "--batch", "16",
            "--seed", "2",
        ])
        assert code == 0
        assert "tracks" in capsys.readouterr().out
        assert load_checkpoint(mckpt)["motion"] is not None

        cfg = tmp_path / "cfg.json"
        save_config(cfg, TrackerConfig(motion_model="lstm", similarity_threshold=0.9,
                                       iou_second_stage=True))
        results = tmp_path / "r.txt"
        code = run_cli(["track", "--det", str(data / "det.txt"),
                        "--out", str(results), "--config", str(cfg),
                        "--motion-checkpoint", str(mckpt)])
        assert code == 0


class TestAblateCommand:
    def test_variant_table_and_json(self, tmp_path, capsys):
        ckpt = tmp_path / "m.ckpt"
        rng = np.random.default_rng(3)
        save_matcher(ckpt, MatcherParams.create(embed_dim=4, hidden=(8, 4, 3), rng=rng))
        table_json = tmp_path / "table.json"
        code = run_cli([
            "ablate",
            "--checkpoint", str(ckpt),
            "--videos", "1",
            "--objects", "4",
            "--frames", "15",
            "--occlusion-rate", "0.2",
            "--json", str(table_json),
            "--seed", "4",
        ])
        assert code == 0
        out = capsys.readouterr().out
        assert "variant" in out
        rows = json.loads(table_json.read_text())
        names = [r["variant"] for r in rows]
        assert names == ["iou-only", "emb-multi", "emb+kalman", "emb+kalman+iou"]
        for r in rows:
            assert set(r) >= {"mota", "mt", "ml", "ids", "fp", "fn"}


class TestErrorPaths:
    def test_missing_file_exits_nonzero(self, tmp_path, capsys):
        code = run_cli(["evaluate", "--gt", str(tmp_path / "nope.txt"),
                        "--results", str(tmp_path / "nope2.txt")])
        assert code == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_matcher_checkpoint_without_embeddings(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert run_cli(simulate_args(data, objects=2, frames=5)) == 0
        ckpt = tmp_path / "m.ckpt"
        rng = np.random.default_rng(0)
        save_matcher(ckpt, MatcherParams.create(embed_dim=16, hidden=(16, 8, 4), rng=rng))
        code = run_cli(["track", "--det", str(data / "det.txt"),
                        "--checkpoint", str(ckpt), "--out", str(tmp_path / "r.txt")])
        assert code == 1
        assert "--emb" in capsys.readouterr().err

    def test_lstm_config_without_weights(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert run_cli(simulate_args(data, objects=2, frames=5)) == 0
        cfg = tmp_path / "cfg.json"
        save_config(cfg, TrackerConfig(motion_model="lstm", similarity_threshold=0.9))
        code = run_cli(["track", "--det", str(data / "det.txt"),
                        "--out", str(tmp_path / "r.txt"), "--config", str(cfg)])
        assert code == 1
        assert "motion" in capsys.readouterr().err

    def test_labels_emb_count_mismatch(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert run_cli(simulate_args(data, objects=2, frames=5)) == 0
        code = run_cli(["train-matcher",
                        "--labels", str(data / "labels.txt"),
                        "--labels", str(data / "labels.txt"),
                        "--emb", str(data / "emb.bin"),
                        "--out", str(tmp_path / "m.ckpt")])
        assert code == 1
        assert "same number" in capsys.readouterr().err

    def test_argparse_errors_return_exit_code(self, capsys):
        assert run_cli(["track"]) == 2  # missing required arguments
        assert run_cli(["no-such-command"]) == 2
        capsys.readouterr()

    def test_preset_and_config_are_exclusive(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        save_config(cfg, TrackerConfig())
        code = run_cli(["track", "--det", "x", "--out", "y",
                        "--preset", "mot17", "--config", str(cfg)])
        assert code == 2
        capsys.readouterr()


class TestConsoleEntry:
    def test_module_runs_as_subprocess(self, tmp_path):
        out = tmp_path / "data"
        proc = subprocess.run(
            [sys.executable, "-m", "embtrack.cli", "simulate", "--out", str(out),
             "--objects", "2", "--frames", "5", "--embed-dim", "4"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert (out / "det.txt").exists()
        proc = subprocess.run(
            [sys.executable, "-m", "embtrack.cli", "evaluate", "--gt",
             str(tmp_path / "missing.txt"), "--results", str(tmp_path / "m2.txt")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 1
        assert proc.stderr.startswith("error:")
