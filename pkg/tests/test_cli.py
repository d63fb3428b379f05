"""End-to-end command-line driver: config parsing, artifacts, reproducibility."""

import hashlib
import json

import numpy as np
import pytest

from longtail.cli import CliError, main, parse_config_file
from longtail.datagen import load_dataset

CONFIG_TEXT = """\
# tiny task for driver tests
task.num_classes = 4
task.feature_dim = 6
task.max_count = 30
task.min_count = 4
task.power = 1.2
task.background_count = 20
task.class_sep = 2.5
task.noise_scale = 0.6

train.epochs_stage1 = 2
train.epochs_stage2 = 2
train.batch_size = 32
train.lr = 0.05
fhm.c_sampled = 3
fhm.m_per_class = 3
eval.per_class = 20
eval.background = 50
"""


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    """A config file, a generated dataset, and a finished stage-1 run."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(CONFIG_TEXT)

    gen_dir = root / "gen"
    assert main(["gen", "--config", str(cfg), "--seed", "5", "--out", str(gen_dir)]) == 0

    stage1_dir = root / "stage1"
    assert main([
        "train", "--config", str(cfg), "--seed", "5", "--mode", "bce_objectness",
        "--data", str(gen_dir / "dataset.txt"), "--out", str(stage1_dir),
    ]) == 0
    return {"root": root, "cfg": cfg, "gen": gen_dir, "stage1": stage1_dir}


def run_bacl(env, out_dir, *extra):
    return main([
        "train", "--config", str(env["cfg"]), "--seed", "5", "--mode", "bacl",
        "--data", str(env["gen"] / "dataset.txt"),
        "--checkpoint", str(env["stage1"] / "checkpoint.npz"),
        "--out", str(out_dir), *extra,
    ])


class TestConfigFile:
    def test_parses_sections_comments_and_blanks(self, tmp_path):
        cfg = tmp_path / "a.cfg"
        cfg.write_text("task.num_classes = 7  # inline comment\n\ntrain.lr=0.5\n")
        sections = parse_config_file(cfg)
        assert sections["task"] == {"num_classes": 7}
        assert sections["hp"] == {"lr": 0.5}

    def test_unknown_key_names_file_and_line(self, tmp_path):
        cfg = tmp_path / "a.cfg"
        cfg.write_text("task.num_classes = 7\ntrain.optimizer = adam\n")
        with pytest.raises(CliError, match=r"a\.cfg:2: unknown config key: train.optimizer"):
            parse_config_file(cfg)

    def test_bad_value_and_missing_equals_rejected(self, tmp_path):
        cfg = tmp_path / "a.cfg"
        cfg.write_text("task.num_classes = many\n")
        with pytest.raises(CliError, match="bad value"):
            parse_config_file(cfg)
        cfg.write_text("task.num_classes\n")
        with pytest.raises(CliError, match="key = value"):
            parse_config_file(cfg)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(CliError, match="cannot read config"):
            parse_config_file(tmp_path / "absent.cfg")

    def test_auto_power_spans_the_count_range(self, tmp_path):
        """power = auto picks the exponent whose count curve hits min_count at
        the last class."""
        cfg = tmp_path / "a.cfg"
        cfg.write_text(
            "task.num_classes = 5\ntask.feature_dim = 4\ntask.max_count = 81\n"
            "task.min_count = 3\ntask.power = auto\ntask.background_count = 10\n"
        )
        out = tmp_path / "out"
        assert main(["gen", "--config", str(cfg), "--seed", "1", "--out", str(out)]) == 0
        ds = load_dataset(out / "dataset.txt")
        assert ds.counts[0] == 81
        assert ds.counts[-1] == 3


class TestGen:
    def test_artifacts_and_manifest(self, env):
        gen = env["gen"]
        for name in ("dataset.txt", "groups.csv", "manifest.json"):
            assert (gen / name).is_file(), name
        manifest = json.loads((gen / "manifest.json").read_text())
        assert manifest["format"] == "longtail-manifest-v1"
        assert manifest["command"] == "gen"
        assert manifest["seed"] == 5
        assert manifest["resolved"]["task"]["num_classes"] == 4
        for name, digest in manifest["artifacts"].items():
            assert hashlib.sha256((gen / name).read_bytes()).hexdigest() == digest

    def test_dataset_round_trips(self, env):
        ds = load_dataset(env["gen"] / "dataset.txt")
        assert ds.num_classes == 4
        assert ds.seed == 5
        assert ds.size == ds.labels.size

    def test_stdout_summarizes_groups(self, env, tmp_path, capsys):
        out = tmp_path / "g2"
        main(["gen", "--config", str(env["cfg"]), "--seed", "5", "--out", str(out)])
        line = capsys.readouterr().out.strip().splitlines()[-1]
        assert line.startswith("gen: wrote")
        assert "4 classes" in line


class TestTrain:
    def test_stage1_artifacts(self, env):
        d = env["stage1"]
        for name in ("checkpoint.npz", "runlog.csv", "summary.json", "manifest.json"):
            assert (d / name).is_file(), name
        summary = json.loads((d / "summary.json").read_text())
        assert summary["mode"] == "bce_objectness"
        assert summary["stage"] == 1
        assert summary["epochs"] == 2
        lines = (d / "runlog.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,loss,acc_overall,acc_rare,acc_common,acc_frequent,norm_cv"
        assert len(lines) == 3

    def test_runlog_byte_identical_across_invocations(self, env, tmp_path):
        """Same config and seed reproduce the stage-1 runlog bit for bit."""
        rerun = tmp_path / "rerun"
        assert main([
            "train", "--config", str(env["cfg"]), "--seed", "5",
            "--mode", "bce_objectness", "--data", str(env["gen"] / "dataset.txt"),
            "--out", str(rerun),
        ]) == 0
        assert (rerun / "runlog.csv").read_bytes() == (
            env["stage1"] / "runlog.csv"
        ).read_bytes()

    def test_bacl_emits_indicator_artifacts(self, env, tmp_path):
        out = tmp_path / "bacl"
        assert run_bacl(env, out) == 0
        for name in (
            "checkpoint.npz", "runlog.csv", "summary.json", "manifest.json",
            "indicators_per_class.csv", "indicators_matrix.csv",
            "feature_distribution.csv",
        ):
            assert (out / name).is_file(), name
        summary = json.loads((out / "summary.json").read_text())
        assert summary["label"] == "bacl-confusion_soft"
        assert summary["stage"] == 2
        assert summary["toggles"] == {
            "use_margin": True, "use_weight_term": True,
            "use_fhm": True, "reinit_head": False,
        }

    def test_bacl_runlog_reproducible(self, env, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_bacl(env, a) == 0
        assert run_bacl(env, b) == 0
        assert (a / "runlog.csv").read_bytes() == (b / "runlog.csv").read_bytes()

    def test_indicator_flag_and_toggles_reach_the_summary(self, env, tmp_path):
        out = tmp_path / "ablate"
        assert run_bacl(env, out, "--indicator", "tpr", "--no-margin", "--no-fhm") == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["indicator_kind"] == "tpr"
        assert summary["label"] == "bacl-tpr-nomargin-nofhm"
        assert summary["toggles"]["use_margin"] is False
        assert summary["toggles"]["use_fhm"] is False
        assert summary["toggles"]["use_weight_term"] is True

    def test_bacl_without_checkpoint_fails_cleanly(self, env, tmp_path, capsys):
        code = main([
            "train", "--config", str(env["cfg"]), "--seed", "5", "--mode", "bacl",
            "--out", str(tmp_path / "x"),
        ])
        assert code == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("error:")
        assert "\n" not in err
        assert "checkpoint" in err

    def test_stage_mode_mismatches_fail(self, env, tmp_path, capsys):
        assert main([
            "train", "--config", str(env["cfg"]), "--seed", "5",
            "--mode", "bce_objectness", "--stage", "2", "--out", str(tmp_path / "y"),
        ]) == 1
        assert run_bacl(env, tmp_path / "z", "--stage", "1") == 1
        err = capsys.readouterr().err
        assert err.count("error:") == 2

    def test_invalid_hyperparameter_fails_cleanly(self, env, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(CONFIG_TEXT + "fcbl.alpha = -1\n")
        code = main([
            "train", "--config", str(cfg), "--seed", "5",
            "--mode", "bce_objectness", "--out", str(tmp_path / "w"),
        ])
        assert code == 1
        assert "alpha" in capsys.readouterr().err


class TestEvalAndReport:
    def test_eval_writes_balance_artifacts(self, env, tmp_path):
        out = tmp_path / "eval"
        assert main([
            "eval", "--config", str(env["cfg"]), "--seed", "5",
            "--checkpoint", str(env["stage1"] / "checkpoint.npz"),
            "--data", str(env["gen"] / "dataset.txt"), "--out", str(out),
        ]) == 0
        assert (out / "balance_report.csv").is_file()
        assert (out / "norm_curve.csv").is_file()
        rows = dict(
            line.split(",")
            for line in (out / "balance_report.csv").read_text().strip().splitlines()[1:]
        )
        assert 0.0 <= float(rows["acc_overall"]) <= 1.0
        assert float(rows["norm_cv"]) >= 0.0

    def test_eval_missing_checkpoint_fails_cleanly(self, env, tmp_path, capsys):
        code = main([
            "eval", "--config", str(env["cfg"]), "--seed", "5",
            "--checkpoint", str(tmp_path / "absent.npz"), "--out", str(tmp_path / "e"),
        ])
        assert code == 1
        assert "cannot load checkpoint" in capsys.readouterr().err

    def test_report_compares_runs(self, env, tmp_path):
        bacl_dir = tmp_path / "bacl"
        assert run_bacl(env, bacl_dir) == 0
        out = tmp_path / "report"
        assert main([
            "report", str(env["stage1"]), str(bacl_dir), "--out", str(out),
        ]) == 0
        final = (out / "final_comparison.csv").read_text().strip().splitlines()
        assert len(final) == 3
        labels = [line.split(",")[0] for line in final[1:]]
        assert labels == ["bce_objectness", "bacl-confusion_soft"]
        assert (out / "epochs_comparison.csv").is_file()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "report"

    def test_report_rejects_non_run_dir(self, env, tmp_path, capsys):
        code = main(["report", str(tmp_path), "--out", str(tmp_path / "r")])
        assert code == 1
        assert "not a training run dir" in capsys.readouterr().err

    def test_argparse_rejects_unknown_mode(self, env, tmp_path):
        with pytest.raises(SystemExit):
            main([
                "train", "--config", str(env["cfg"]), "--seed", "5",
                "--mode", "adam", "--out", str(tmp_path / "q"),
            ])


class TestSeedSensitivity:
    def test_different_seeds_change_the_dataset(self, env, tmp_path):
        out7 = tmp_path / "seed7"
        assert main(["gen", "--config", str(env["cfg"]), "--seed", "7",
                     "--out", str(out7)]) == 0
        a = load_dataset(env["gen"] / "dataset.txt")
        b = load_dataset(out7 / "dataset.txt")
        assert not np.array_equal(a.features, b.features)
