import json
import os

import pytest
from click.testing import CliRunner

from sharpcomp.cli import main

BASE_CONFIG = {
    "schema_version": 1,
    "seed": 5,
    "dataset": {"kind": "gaussian_mixture", "n_per_class": 30, "classes": 2,
                "dim": 4, "separation": 4.0, "seed": 5},
    "arch": {"kind": "mlp", "widths": [4, 6, 2], "activation": "tanh"},
    "train": {"learning_rate": 0.1, "batch_size": 8, "steps": 120,
              "eval_every": 60, "metric_sample_budget": 10},
    "metrics": {"adaptive_draws": 2},
    "sweep": {"learning_rates": [0.05, 0.1], "batch_sizes": [8], "seeds": [0]},
}


@pytest.fixture
def runner():
    return CliRunner()


def write_config(tmp_path, name="config.json", **overrides):
    config = json.loads(json.dumps(BASE_CONFIG))
    for key, value in overrides.items():
        section, _, field = key.partition(".")
        if field:
            config[section][field] = value
        else:
            config[section] = value
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return str(path)


class TestTrainCommand:
    def test_success_writes_outputs(self, runner, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        result = runner.invoke(main, ["train", cfg, str(out)])
        assert result.exit_code == 0, result.output
        csv_lines = (out / "metrics.csv").read_text().strip().split("\n")
        assert len(csv_lines) >= 3  # header + two checkpoints
        assert (out / "manifest.json").exists()
        assert (out / "checkpoint_final.json").exists()
        assert (out / "summary.json").exists()

    def test_config_round_trip_in_manifest(self, runner, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        assert runner.invoke(main, ["train", cfg, str(out)]).exit_code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        resolved = manifest["config"]
        assert resolved["train"]["learning_rate"] == 0.1
        assert json.loads(json.dumps(resolved)) == resolved

    def test_flag_overrides_config(self, runner, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        result = runner.invoke(main, ["train", cfg, str(out), "--lr", "0.07"])
        assert result.exit_code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["train"]["learning_rate"] == 0.07

    def test_missing_dataset_file_exit_4(self, runner, tmp_path):
        cfg = write_config(tmp_path, dataset={
            "kind": "idx", "train_images": "/nonexistent/images.idx",
            "train_labels": "/nonexistent/labels.idx",
            "test_images": "/nonexistent/imt.idx",
            "test_labels": "/nonexistent/labt.idx"})
        result = runner.invoke(main, ["train", cfg, str(tmp_path / "o")])
        assert result.exit_code == 4
        assert "/nonexistent/images.idx" in result.output

    def test_invalid_lr_exit_2(self, runner, tmp_path):
        cfg = write_config(tmp_path, **{"train.learning_rate": -1.0})
        result = runner.invoke(main, ["train", cfg, str(tmp_path / "o")])
        assert result.exit_code == 2
        assert "learning_rate" in result.output

    def test_divergence_exit_3(self, runner, tmp_path):
        cfg = write_config(tmp_path, **{"train.learning_rate": 1e5})
        result = runner.invoke(main, ["train", cfg, str(tmp_path / "o")])
        assert result.exit_code == 3

    def test_deterministic_csv_bytes(self, runner, tmp_path):
        cfg = write_config(tmp_path)
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert runner.invoke(main, ["train", cfg, str(out)]).exit_code == 0
            blobs.append((out / "metrics.csv").read_bytes())
        assert blobs[0] == blobs[1]

    def test_out_root_env_var(self, runner, tmp_path):
        cfg = write_config(tmp_path)
        result = runner.invoke(main, ["train", cfg, "rel_run"],
                               env={"SHARPCOMP_OUT_ROOT": str(tmp_path)})
        assert result.exit_code == 0
        assert (tmp_path / "rel_run" / "metrics.csv").exists()

    def test_hessian_oracle_in_summary(self, runner, tmp_path):
        cfg = write_config(tmp_path, metrics={"adaptive_draws": 2,
                                              "hessian_oracle": True})
        out = tmp_path / "run"
        assert runner.invoke(main, ["train", cfg, str(out)]).exit_code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["hessian_trace_mode"] == "exact"
        report = summary["hessian_oracle"]
        assert report["name"] == "fd_hessian_trace_vs_sharpness"
        assert report["n_points"] == 1


class TestVerifyBounds:
    @pytest.fixture
    def trained(self, runner, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        assert runner.invoke(main, ["train", cfg, str(out)]).exit_code == 0
        return cfg, out

    def test_trained_checkpoint_passes(self, runner, trained):
        cfg, out = trained
        result = runner.invoke(main, ["verify-bounds", cfg,
                                      str(out / "checkpoint_final.json")])
        assert result.exit_code == 0, result.output
        assert "all" in result.output and "hold" in result.output

    def test_corrupted_record_exit_5(self, runner, trained):
        cfg, out = trained
        path = out / "checkpoint_final.json"
        payload = json.loads(path.read_text())
        payload["record"]["mls"] = payload["record"]["mls_bound"] * 50.0
        bad = out / "corrupted.json"
        bad.write_text(json.dumps(payload))
        result = runner.invoke(main, ["verify-bounds", cfg, str(bad)])
        assert result.exit_code == 5
        assert "VIOLATED" in result.output

    def test_empty_sample_budget_exit_2(self, runner, trained):
        cfg, out = trained
        result = runner.invoke(main, ["verify-bounds", cfg,
                                      str(out / "checkpoint_final.json"),
                                      "--samples", "0"])
        assert result.exit_code == 2


class TestSweepAndCorrelate:
    def test_27_run_grid(self, runner, tmp_path):
        cfg = write_config(
            tmp_path,
            sweep={"learning_rates": [0.05, 0.1, 0.2],
                   "batch_sizes": [4, 8, 16], "seeds": [0, 1, 2]},
            train={"learning_rate": 0.1, "batch_size": 8, "steps": 40,
                   "eval_every": 40, "metric_sample_budget": 6},
            metrics={"adaptive_draws": 1})
        out = tmp_path / "sweep"
        result = runner.invoke(main, ["sweep", cfg, str(out)])
        assert result.exit_code == 0, result.output
        run_dirs = sorted(p for p in os.listdir(out) if p.startswith("run_"))
        assert len(run_dirs) == 27
        assert (out / "summary.json").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_runs"] == 27
        assert summary["bound_violation_count"] == 0

        # correlate twice: identical summary bytes
        r1 = runner.invoke(main, ["correlate", str(out)])
        assert r1.exit_code == 0, r1.output
        blob1 = (out / "correlations.json").read_bytes()
        r2 = runner.invoke(main, ["correlate", str(out)])
        assert r2.exit_code == 0
        assert (out / "correlations.json").read_bytes() == blob1
        scatters = [p for p in os.listdir(out) if p.startswith("scatter_")]
        assert scatters

    def test_correlate_too_few_runs_exit_2(self, runner, tmp_path):
        cfg = write_config(tmp_path, sweep={"learning_rates": [0.1],
                                            "batch_sizes": [8], "seeds": [0]},
                           train={"learning_rate": 0.1, "batch_size": 8,
                                  "steps": 30, "eval_every": 30,
                                  "metric_sample_budget": 6})
        out = tmp_path / "sweep"
        assert runner.invoke(main, ["sweep", cfg, str(out)]).exit_code == 0
        result = runner.invoke(main, ["correlate", str(out)])
        assert result.exit_code == 2

    def test_sweep_isolates_divergent_runs(self, runner, tmp_path):
        cfg = write_config(tmp_path,
                           sweep={"learning_rates": [0.1, 1e5],
                                  "batch_sizes": [8], "seeds": [0, 1]},
                           train={"learning_rate": 0.1, "batch_size": 8,
                                  "steps": 60, "eval_every": 60,
                                  "metric_sample_budget": 6})
        out = tmp_path / "sweep"
        result = runner.invoke(main, ["sweep", cfg, str(out)])
        assert result.exit_code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_diverged"] == 2
        assert summary["n_completed"] == 2


class TestMetricsCommand:
    def test_prints_record(self, runner, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        assert runner.invoke(main, ["train", cfg, str(out)]).exit_code == 0
        result = runner.invoke(main, ["metrics", cfg,
                                      str(out / "checkpoint_final.json")])
        assert result.exit_code == 0, result.output
        assert "sharpness_approx=" in result.output
        assert "mls=" in result.output

    def test_test_selector(self, runner, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        assert runner.invoke(main, ["train", cfg, str(out)]).exit_code == 0
        result = runner.invoke(main, ["metrics", cfg,
                                      str(out / "checkpoint_final.json"),
                                      "--selector", "test-all"])
        assert result.exit_code == 0, result.output
