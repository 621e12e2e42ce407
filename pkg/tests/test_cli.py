"""CLI plumbing: config parsing, subcommand wiring, exit codes, artifacts."""

import numpy as np
import pytest
from click.testing import CliRunner

from fieldloc import cli
from fieldloc import dataset as ds
from fieldloc import network
from fieldloc import trainer as tr
from fieldloc.optim import NonFiniteLoss

TINY_CFG = """
# quick desk experiment for tests
range_min = 10
range_max = 60
step = 5
noise_intensity = 0.0
max_epochs = 10
batch_size = 64
patience = 10
lbfgs_max_iter = 10
seed = 0
"""


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


class TestConfig:
    def test_defaults_match_schema(self):
        config = cli.ExperimentConfig()
        assert config.epsilon0 == 8.854e-12
        assert config.range_min == 10.0 and config.range_max == 110.0
        assert config.step == 0.5
        assert config.hidden_layers == 8 and config.hidden_units == 16
        assert config.adam_learning_rate == 1e-4
        assert config.lbfgs_history == 50
        assert config.lbfgs_step_scale == 10.0
        assert config.lbfgs_grad_tol == 1e-12
        assert config.max_epochs == 50000

    def test_load_and_override(self, tiny_config):
        config = cli.load_config(tiny_config)
        assert config.range_max == 60.0
        assert config.max_epochs == 10
        assert config.epsilon0 == 8.854e-12  # untouched default

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("learning_rate = 0.1\n")
        with pytest.raises(cli.ConfigError, match="unknown key"):
            cli.load_config(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("max_epochs = many\n")
        with pytest.raises(cli.ConfigError, match="max_epochs"):
            cli.load_config(path)

    def test_electrode_parsing(self):
        config = cli.ExperimentConfig()
        electrodes = config.electrode_systems
        assert len(electrodes) == 2
        assert electrodes[0].charge == 1.0
        assert electrodes[1].source.z == 100.0

    def test_electrode_syntax_errors(self):
        with pytest.raises(cli.ConfigError):
            cli._parse_electrodes("1|0,0,0")
        with pytest.raises(cli.ConfigError):
            cli._parse_electrodes("1@(0,0)")
        with pytest.raises(cli.ConfigError):
            cli._parse_electrodes("")

    def test_snapshot_roundtrip(self, tmp_path, tiny_config):
        config = cli.load_config(tiny_config)
        snapshot = tmp_path / "snapshot.cfg"
        snapshot.write_text(config.to_text())
        again = cli.load_config(snapshot)
        assert again.values == config.values

    def test_help_documents_config_keys(self, runner):
        result = runner.invoke(cli.main, ["--help"])
        assert result.exit_code == 0
        for key in cli.CONFIG_SCHEMA:
            assert key in result.output


class TestGenerate:
    def test_dry_run_reports_reference_count(self, runner, tmp_path):
        cfg = tmp_path / "full.cfg"
        cfg.write_text("")  # all defaults: [10,110] step 0.5
        result = runner.invoke(
            cli.main, ["generate", str(cfg), "-o", str(tmp_path / "d.csv"), "--dry-run"]
        )
        assert result.exit_code == 0
        assert "8120601" in result.output.replace(",", "")

    def test_writes_csv_and_stats(self, runner, tiny_config, tmp_path):
        out = tmp_path / "data.csv"
        result = runner.invoke(cli.main, ["generate", str(tiny_config), "-o", str(out)])
        assert result.exit_code == 0, result.output
        assert "M = 1331" in result.output
        data = ds.load_csv(out)
        assert len(data) == 11 ** 3
        stats = ds.load_stats(str(out) + ".stats")
        assert stats.position_min[0] == 10.0

    def test_rerun_is_byte_identical(self, runner, tiny_config, tmp_path):
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        assert runner.invoke(cli.main, ["generate", str(tiny_config), "-o", str(out1)]).exit_code == 0
        assert runner.invoke(cli.main, ["generate", str(tiny_config), "-o", str(out2)]).exit_code == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_config_error_exit_code(self, runner, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("bogus = 1\n")
        result = runner.invoke(cli.main, ["generate", str(bad), "-o", str(tmp_path / "x.csv")])
        assert result.exit_code == 2

    def test_missing_config_exit_code(self, runner, tmp_path):
        result = runner.invoke(
            cli.main, ["generate", str(tmp_path / "nope.cfg"), "-o", str(tmp_path / "x.csv")]
        )
        assert result.exit_code == 2


class TestTrain:
    def test_end_to_end_artifacts(self, runner, tiny_config, tmp_path):
        data_path = tmp_path / "data.csv"
        runner.invoke(cli.main, ["generate", str(tiny_config), "-o", str(data_path)])
        out = tmp_path / "run"
        result = runner.invoke(
            cli.main,
            ["train", str(tiny_config), "--dataset", str(data_path), "-o", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert (out / "model.ckpt").exists()
        assert (out / "train_report.csv").exists()
        assert (out / "config.cfg").exists()
        assert (out / "dataset.sha256").exists()
        assert "final losses" in result.output

    def test_checkpoint_reproduces_final_loss(self, runner, tiny_config, tmp_path):
        data_path = tmp_path / "data.csv"
        runner.invoke(cli.main, ["generate", str(tiny_config), "-o", str(data_path)])
        out = tmp_path / "run"
        runner.invoke(cli.main, ["train", str(tiny_config), "--dataset", str(data_path), "-o", str(out)])
        params, stats = network.load_checkpoint(out / "model.ckpt")
        config = cli.load_config(tiny_config)
        data = ds.load_csv(data_path)
        train_raw, _ = ds.split(data, config.holdout_fraction, config.seed + 1)
        norm = ds.normalize(train_raw, stats)
        total, *_ = tr.loss(params, norm.fields, norm.positions, config.train_config().weights)
        report_lines = (out / "train_report.csv").read_text().splitlines()
        reported = float(report_lines[-1].rsplit(",", 1)[1])
        assert total == pytest.approx(reported, rel=1e-12)

    def test_max_epochs_override_runs_one_epoch(self, runner, tiny_config, tmp_path):
        out = tmp_path / "run"
        result = runner.invoke(
            cli.main, ["train", str(tiny_config), "-o", str(out), "--max-epochs", "1"]
        )
        assert result.exit_code == 0, result.output
        lines = (out / "train_report.csv").read_text().splitlines()
        adam_rows = [l for l in lines[1:] if l.split(",")[1] == "adam"]
        assert len(adam_rows) == 1

    def test_numeric_failure_exit_code(self, runner, tiny_config, tmp_path, monkeypatch):
        def explode(config, data):
            raise NonFiniteLoss("boom")

        monkeypatch.setattr(cli.trainer, "train", explode)
        result = runner.invoke(cli.main, ["train", str(tiny_config), "-o", str(tmp_path / "r")])
        assert result.exit_code == 4

    def test_missing_dataset_exit_code(self, runner, tiny_config, tmp_path):
        result = runner.invoke(
            cli.main,
            ["train", str(tiny_config), "--dataset", str(tmp_path / "nope.csv"), "-o", str(tmp_path / "r")],
        )
        assert result.exit_code == 3


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """One tiny trained model shared by the eval tests."""
    root = tmp_path_factory.mktemp("trained")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    out = root / "run"
    runner = CliRunner()
    result = runner.invoke(cli.main, ["train", str(cfg), "-o", str(out)])
    assert result.exit_code == 0, result.output
    return cfg, out / "model.ckpt", root


class TestEval:
    @pytest.mark.parametrize("kind", ["spiral", "circle", "random"])
    def test_trajectories(self, runner, trained_run, kind, tmp_path):
        cfg, model, _ = trained_run
        out = tmp_path / f"eval_{kind}"
        result = runner.invoke(
            cli.main,
            ["eval", str(model), "--config", str(cfg), "--trajectory", kind,
             "--points", "32", "-o", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert (out / f"trajectory_{kind}.csv").exists()
        metrics = dict(
            line.split("=") for line in (out / "metrics.txt").read_text().splitlines()
        )
        assert all(float(v) >= 0.0 for v in metrics.values())

    def test_eval_from_points_file(self, runner, trained_run, tmp_path):
        cfg, model, _ = trained_run
        pts_path = tmp_path / "pts.csv"
        data = ds.Dataset(np.random.default_rng(0).uniform(20, 50, (10, 3)), np.zeros((10, 3)))
        ds.save_csv(data, pts_path)
        out = tmp_path / "eval_file"
        result = runner.invoke(
            cli.main, ["eval", str(model), "--config", str(cfg),
                       "--trajectory", str(pts_path), "-o", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert (out / "trajectory_pts.csv").exists()

    def test_noise_sweep_shape(self, runner, trained_run, tmp_path):
        cfg, model, _ = trained_run
        out = tmp_path / "sweep"
        result = runner.invoke(
            cli.main,
            ["eval", str(model), "--config", str(cfg), "--points", "16",
             "--sweep-noise", "0,0.05,0.10", "-o", str(out)],
        )
        assert result.exit_code == 0, result.output
        lines = (out / "noise_sweep.csv").read_text().splitlines()
        assert lines[0] == "noise,mae_x,mae_y,mae_z"
        assert len(lines) == 4  # header + one row per intensity
        for line in lines[1:]:
            assert len(line.split(",")) == 4

    def test_determinism(self, runner, trained_run, tmp_path):
        cfg, model, _ = trained_run
        out1, out2 = tmp_path / "e1", tmp_path / "e2"
        for out in (out1, out2):
            result = runner.invoke(
                cli.main,
                ["eval", str(model), "--config", str(cfg), "--trajectory", "circle",
                 "--points", "16", "--noise", "0.05", "-o", str(out)],
            )
            assert result.exit_code == 0, result.output
        assert (out1 / "metrics.txt").read_bytes() == (out2 / "metrics.txt").read_bytes()
        assert (out1 / "trajectory_circle.csv").read_bytes() == (out2 / "trajectory_circle.csv").read_bytes()

    def test_bad_model_path_exit_code(self, runner, trained_run, tmp_path):
        cfg, _, _ = trained_run
        result = runner.invoke(
            cli.main, ["eval", str(tmp_path / "nope.ckpt"), "--config", str(cfg),
                       "-o", str(tmp_path / "x")],
        )
        assert result.exit_code == 3


class TestSweep:
    def test_step_sweep_retrains_and_tabulates(self, runner, tmp_path):
        cfg = tmp_path / "s.cfg"
        cfg.write_text(TINY_CFG.replace("max_epochs = 10", "max_epochs = 3")
                       .replace("lbfgs_max_iter = 10", "lbfgs_max_iter = 3"))
        out = tmp_path / "sweep"
        result = runner.invoke(
            cli.main,
            ["sweep", str(cfg), "--param", "step", "--values", "5,6.25",
             "--points", "16", "-o", str(out)],
        )
        assert result.exit_code == 0, result.output
        lines = (out / "step_sweep.csv").read_text().splitlines()
        assert lines[0] == "step,mae_x,mae_y,mae_z"
        assert len(lines) == 3
        assert (out / "config.cfg").exists()

    def test_noise_sweep_retrains(self, runner, tmp_path):
        cfg = tmp_path / "s.cfg"
        cfg.write_text(TINY_CFG.replace("max_epochs = 10", "max_epochs = 3")
                       .replace("lbfgs_max_iter = 10", "lbfgs_max_iter = 3"))
        out = tmp_path / "sweep"
        result = runner.invoke(
            cli.main,
            ["sweep", str(cfg), "--param", "noise", "--values", "0,0.1",
             "--points", "16", "-o", str(out)],
        )
        assert result.exit_code == 0, result.output
        lines = (out / "noise_sweep.csv").read_text().splitlines()
        assert len(lines) == 3

    def test_bad_values_exit_code(self, runner, tmp_path):
        cfg = tmp_path / "s.cfg"
        cfg.write_text(TINY_CFG)
        result = runner.invoke(
            cli.main, ["sweep", str(cfg), "--param", "step", "--values", "abc",
                       "-o", str(tmp_path / "x")],
        )
        assert result.exit_code == 2


class TestThreads:
    def test_thread_cap_accepted_and_results_unchanged(self, runner, tiny_config, tmp_path):
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        r1 = runner.invoke(cli.main, ["--threads", "1", "generate", str(tiny_config), "-o", str(out1)])
        r2 = runner.invoke(cli.main, ["generate", str(tiny_config), "-o", str(out2)])
        assert r1.exit_code == 0 and r2.exit_code == 0
        assert out1.read_bytes() == out2.read_bytes()
