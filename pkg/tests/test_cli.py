import json
from pathlib import Path

import pytest
import yaml

from pckd.cli import main, parse_sweep
from pckd.config import load_experiment_config, parse_experiment_config
from pckd.errors import ConfigError
from pckd.train import RunLog


@pytest.fixture()
def base_config(tmp_path):
    cfg = {
        "output_dir": str(tmp_path / "run"),
        "dataset": {
            "kind": "synthetic", "num_classes": 4, "per_class": 12,
            "val_per_class": 4, "test_per_class": 4, "image_size": 16,
            "seed": 0, "hard_fraction": 0.25, "noise_std": 0.05,
        },
        "teacher": {"backbone": "convnet_small",
                    "checkpoint": str(tmp_path / "teacher.pt")},
        "student": {"backbone": "convnet_tiny"},
        "train": {"epochs": 1, "batch_size": 16, "lr": 0.05, "lr_milestones": [],
                  "seed": 0, "deterministic": True},
        "loss": {"beta_cc": 0.05, "beta_fa": 5.0, "beta_ca": 1.0},
        "preview": {"policy": "preview", "epsilon": 0.3},
    }
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def read_log(run_dir) -> RunLog:
    return RunLog.load(Path(run_dir) / "log.ndjson")


class TestConfigSchema:
    def test_round_trip_is_identity(self, base_config):
        cfg = load_experiment_config(base_config)
        again = parse_experiment_config(yaml.safe_load(cfg.to_yaml()))
        assert again.to_dict() == cfg.to_dict()

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown keys.*typo"):
            parse_experiment_config({"typo": 1})

    def test_nested_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="loss"):
            parse_experiment_config({"loss": {"beta_zz": 1.0}})

    def test_error_names_field(self):
        with pytest.raises(ConfigError, match="train.lr"):
            parse_experiment_config({"train": {"lr": -1.0}})

    def test_policy_validated(self):
        with pytest.raises(ConfigError, match="preview.policy"):
            parse_experiment_config({"preview": {"policy": "mystery"}})


class TestSweepParsing:
    def test_plain_float(self):
        assert parse_sweep("0.05") == [0.05]

    def test_range_with_step(self):
        assert parse_sweep("10..50 step 10") == [10.0, 20.0, 30.0, 40.0, 50.0]

    def test_range_colon_form(self):
        assert parse_sweep("1..2:0.5") == [1.0, 1.5, 2.0]

    def test_garbage_rejected(self):
        with pytest.raises(ConfigError):
            parse_sweep("1..5")
        with pytest.raises(ConfigError):
            parse_sweep("abc")


class TestPretrainCommand:
    def test_minimal_config_succeeds(self, base_config, tmp_path, capsys):
        assert main(["pretrain", "--config", str(base_config)]) == 0
        assert (tmp_path / "teacher.pt").exists()
        run_dir = tmp_path / "run"
        assert (run_dir / "log.ndjson").exists()
        assert (run_dir / "config.yaml").exists()
        results = json.loads((run_dir / "results.json").read_text())
        assert "test_top1" in results

    def test_negative_lr_exits_two_naming_field(self, base_config, capsys):
        code = main(["pretrain", "--config", str(base_config), "--lr", "-0.5"])
        assert code == 2
        assert "train.lr" in capsys.readouterr().err

    def test_missing_data_root_exits_one(self, base_config, tmp_path, capsys):
        raw = yaml.safe_load(base_config.read_text())
        raw["dataset"] = {"kind": "binary", "name": "absent",
                          "root": str(tmp_path / "nowhere"), "num_classes": 4,
                          "image_size": 16}
        base_config.write_text(yaml.safe_dump(raw))
        code = main(["pretrain", "--config", str(base_config)])
        assert code == 1
        assert "absent" in capsys.readouterr().err


class TestDistillCommand:
    def _pretrain(self, base_config):
        assert main(["pretrain", "--config", str(base_config)]) == 0

    def test_vanilla_kd_flags(self, base_config, tmp_path):
        self._pretrain(base_config)
        out = tmp_path / "kd"
        code = main([
            "distill", "--config", str(base_config), "--output-dir", str(out),
            "--policy", "none", "--beta-cc", "0", "--beta-fa", "0", "--beta-ca", "0",
        ])
        assert code == 0
        log = read_log(out)
        assert log.meta["policy"] == "none"
        assert log.meta["loss_weights"]["beta_fa"] == 0.0
        assert (out / "student.pt").exists()
        assert (out / "student-best.pt").exists()

    def test_missing_teacher_checkpoint_exits_one(self, base_config, capsys):
        code = main(["distill", "--config", str(base_config)])
        assert code == 1
        assert "checkpoint" in capsys.readouterr().err

    def test_preview_on_ce(self, base_config, tmp_path):
        self._pretrain(base_config)
        out = tmp_path / "ce-preview"
        code = main([
            "distill", "--config", str(base_config), "--output-dir", str(out),
            "--preview-on", "ce", "--alpha", "0", "--beta-cc", "0",
            "--beta-fa", "0", "--beta-ca", "0",
        ])
        assert code == 0
        assert read_log(out).meta["preview_applies_to"] == ["ce"]

    def test_sweep_emits_one_run_per_value(self, base_config, tmp_path):
        self._pretrain(base_config)
        out = tmp_path / "sweep"
        code = main([
            "distill", "--config", str(base_config), "--output-dir", str(out),
            "--beta-fa", "10..50 step 10", "--epochs", "1",
        ])
        assert code == 0
        run_dirs = sorted(p for p in out.iterdir() if p.is_dir())
        assert len(run_dirs) == 5
        for d in run_dirs:
            log = read_log(d)
            assert log.meta["sweep_param"] == "beta_fa"
            assert (d / "log.ndjson").exists()

    def test_seed_idempotence_in_deterministic_mode(self, base_config, tmp_path):
        self._pretrain(base_config)
        logs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["distill", "--config", str(base_config),
                         "--output-dir", str(out), "--seed", "7"]) == 0
            logs.append(read_log(out))
        assert logs[0].step_records == logs[1].step_records
        strip = lambda recs: [{k: v for k, v in r.items() if k != "wall_time"}
                              for r in recs]
        assert strip(logs[0].epoch_records) == strip(logs[1].epoch_records)

    def test_data_root_env_override(self, base_config, tmp_path, monkeypatch, capsys):
        raw = yaml.safe_load(base_config.read_text())
        raw["dataset"] = {"kind": "binary", "name": "missing",
                          "root": "irrelevant", "num_classes": 4, "image_size": 16}
        base_config.write_text(yaml.safe_dump(raw))
        monkeypatch.setenv("PCKD_DATA_ROOT", str(tmp_path / "envroot"))
        code = main(["pretrain", "--config", str(base_config)])
        assert code == 1
        assert "envroot" in capsys.readouterr().err


class TestReportCommand:
    @pytest.fixture()
    def two_runs(self, base_config, tmp_path):
        assert main(["pretrain", "--config", str(base_config)]) == 0
        kd = tmp_path / "kd"
        pk = tmp_path / "pckd"
        assert main(["distill", "--config", str(base_config), "--output-dir", str(kd),
                     "--policy", "none", "--beta-cc", "0", "--beta-fa", "0",
                     "--beta-ca", "0"]) == 0
        assert main(["distill", "--config", str(base_config),
                     "--output-dir", str(pk)]) == 0
        return kd, pk

    def test_report_artifacts(self, two_runs, tmp_path):
        kd, pk = two_runs
        out = tmp_path / "report"
        code = main(["report", str(kd), str(pk), "--out", str(out),
                     "--baseline", "kd"])
        assert code == 0
        for name in ("accuracy.csv", "accuracy.md", "accuracy.png",
                     "weight_trace.csv", "weight_trace.png"):
            assert (out / name).exists(), name

        acc_lines = (out / "accuracy.csv").read_text().strip().splitlines()
        assert acc_lines[0] == "run,policy,test_top1,val_top1,delta_vs_baseline"
        assert len(acc_lines) == 3
        kd_row = [l for l in acc_lines[1:] if l.startswith("kd,")][0]
        assert float(kd_row.split(",")[-1]) == 0.0

        trace_lines = (out / "weight_trace.csv").read_text().strip().splitlines()
        assert trace_lines[0] == "epoch,policy,mean_weight,frac_easy"
        value = trace_lines[1].split(",")[2]
        assert len(value.split(".")[1]) == 6  # fixed 6-decimal formatting

        features = [p for p in out.iterdir() if p.name.startswith("features_")]
        assert features
        header, first = features[0].read_text().splitlines()[:2]
        assert header.split(",")[-1] == "label"

    def test_missing_log_exits_one(self, tmp_path, capsys):
        code = main(["report", str(tmp_path / "ghost"), "--out", str(tmp_path / "r")])
        assert code == 1
        assert "ghost" in capsys.readouterr().err

    def test_markdown_has_arrow_convention(self, two_runs, tmp_path):
        kd, pk = two_runs
        out = tmp_path / "report2"
        assert main(["report", str(kd), str(pk), "--out", str(out),
                     "--baseline", "kd"]) == 0
        md = (out / "accuracy.md").read_text()
        assert "↑" in md or "↓" in md or "(=)" in md
