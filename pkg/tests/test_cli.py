import os

import numpy as np
import pytest

import main
from src import autodiff
from src.checkpoint import load_checkpoint
from src.config import Config
from src.data_logger import DataLogger, read_table
from src.data_tasks import split_id_ood
from src.evaluation import ratio_stats, sweep, sweep_from_table
from src.experiment_config import ExperimentConfig
from src.models import init_model

TINY = """
[task]
kind = denoising
n = 4
t = 3
train_count = 8
heldout_count = 6
gamma_train = 0.1
gamma_grid = 0.1, 0.3

[model]
kind = ut
layers = 2
d = 4

[train]
epochs = {epochs}
batch_size = 4
eta1 = 0.001
optimizer = sgd

[run]
seeds = 0
"""


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    monkeypatch.setattr(Config, "LOG_FILE", str(tmp_path / "logs" / "test.log"))
    monkeypatch.setattr(Config, "OUTPUT_DIR", str(tmp_path / "runs"))


def write_config(tmp_path, epochs=2, name="tiny.ini"):
    path = tmp_path / name
    path.write_text(TINY.format(epochs=epochs))
    return str(path)


def run_dir(config_path, out):
    config = ExperimentConfig.from_file(config_path)
    return os.path.join(out, config.run_name(0))


@pytest.fixture
def trained(tmp_path):
    config_path = write_config(tmp_path)
    out = str(tmp_path / "out")
    assert main.run_cli(["train", "--config", config_path, "--out", out]) == main.EXIT_OK
    directory = run_dir(config_path, out)
    checkpoints = [os.path.join(directory, f"{v}.ckpt") for v in ("constrained", "unconstrained")]
    return config_path, out, checkpoints


class TestExitCodes:
    def test_no_command(self):
        assert main.run_cli([]) == main.EXIT_CONFIG

    def test_missing_required_field(self, tmp_path, capsys):
        path = tmp_path / "broken.ini"
        path.write_text("[task]\nkind = denoising\n[model]\nkind = ut\n")
        assert main.run_cli(["train", "--config", str(path)]) == main.EXIT_CONFIG
        assert "model.layers" in capsys.readouterr().out

    def test_missing_config_file(self, tmp_path):
        assert main.run_cli(["train", "--config", str(tmp_path / "absent.ini")]) == main.EXIT_CONFIG

    def test_bad_environment(self, tmp_path, monkeypatch):
        monkeypatch.setattr(Config, "GRADCHECK_TRIALS", 0)
        assert main.run_cli(["train", "--config", write_config(tmp_path)]) == main.EXIT_CONFIG

    def test_gradcheck_passes(self, capsys):
        assert main.run_cli(["gradcheck", "--trials", "3"]) == main.EXIT_OK
        assert "All gradient checks passed" in capsys.readouterr().out

    def test_gradcheck_detects_corrupted_backward(self, monkeypatch, capsys):
        monkeypatch.setattr(autodiff.ReLU, "backward", lambda self, grad: (grad * 0.5,))
        assert main.run_cli(["gradcheck", "--trials", "3"]) == main.EXIT_FAILURE
        assert "relu" in capsys.readouterr().out

    def test_corrupt_checkpoint(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        code = main.run_cli(["sweep", "--config", write_config(tmp_path), "--checkpoint", str(bad),
                             "--out", str(tmp_path / "out")])
        assert code == main.EXIT_FAILURE

    def test_checkpoint_from_other_architecture(self, tmp_path, trained):
        config_path, out, checkpoints = trained
        other = tmp_path / "deeper.ini"
        other.write_text(TINY.format(epochs=2).replace("layers = 2", "layers = 3"))
        code = main.run_cli(["sweep", "--config", str(other), "--checkpoint", checkpoints[0], "--out", out])
        assert code == main.EXIT_FAILURE


class TestTrain:
    def test_outputs(self, trained):
        config_path, out, checkpoints = trained
        directory = run_dir(config_path, out)
        for path in checkpoints:
            assert os.path.isfile(path)
        for variant in ("constrained", "unconstrained"):
            log = read_table(os.path.join(directory, f"{variant}_train_log.csv"))
            assert len(log) == 2 * 2
            assert (log["wall_ms"] == 0).all()
        assert os.path.isfile(os.path.join(directory, "config.ini"))
        unconstrained = read_table(os.path.join(directory, "unconstrained_train_log.csv"))
        assert (unconstrained[["lambda_1", "lambda_2"]] == 0).all().all()

    def test_zero_epochs_saves_initialization(self, tmp_path):
        config_path = write_config(tmp_path, epochs=0)
        out = str(tmp_path / "out")
        assert main.run_cli(["train", "--config", config_path, "--out", out]) == main.EXIT_OK
        params, meta = load_checkpoint(os.path.join(run_dir(config_path, out), "constrained.ckpt"))
        config = ExperimentConfig.from_file(config_path)
        expected = init_model(**config.model_kwargs("constrained", 0))
        assert meta["model_tag"] == "constrained" and meta["seed"] == 0
        assert meta["config_hash"] == config.config_hash()
        for (name, tensor), (other, reference) in zip(params.named_blocks().items(), expected.named_blocks().items()):
            assert name == other
            assert np.array_equal(tensor.data, reference.data)

    def test_deterministic(self, tmp_path):
        config_path = write_config(tmp_path)
        outputs = []
        for name in ("a", "b"):
            out = str(tmp_path / name)
            assert main.run_cli(["train", "--config", config_path, "--out", out]) == main.EXIT_OK
            outputs.append(run_dir(config_path, out))
        for filename in ("constrained.ckpt", "unconstrained.ckpt", "constrained_train_log.csv",
                         "unconstrained_train_log.csv", "config.ini"):
            with open(os.path.join(outputs[0], filename), "rb") as f, open(os.path.join(outputs[1], filename), "rb") as g:
                assert f.read() == g.read()

    def test_seed_override(self, tmp_path):
        config_path = write_config(tmp_path)
        out = str(tmp_path / "out")
        assert main.run_cli(["train", "--config", config_path, "--out", out, "--seed", "4"]) == main.EXIT_OK
        config = ExperimentConfig.from_file(config_path)
        assert os.path.isdir(os.path.join(out, config.run_name(4)))
        assert not os.path.isdir(os.path.join(out, config.run_name(0)))

    def test_training_logs_written_by_run_logger(self, tmp_path, monkeypatch):
        calls = []
        write = DataLogger.log_training

        def recording(self, variant, records, num_layers):
            calls.append((variant, len(records), num_layers))
            return write(self, variant, records, num_layers)

        monkeypatch.setattr(DataLogger, "log_training", recording)
        assert main.run_cli(["train", "--config", write_config(tmp_path), "--out", str(tmp_path / "out")]) == main.EXIT_OK
        assert sorted(calls) == [("constrained", 4, 2), ("unconstrained", 4, 2)]

    def test_unwritable_training_log(self, tmp_path, monkeypatch):
        monkeypatch.setattr(DataLogger, "log_training", lambda self, variant, records, num_layers: False)
        code = main.run_cli(["train", "--config", write_config(tmp_path), "--out", str(tmp_path / "out")])
        assert code == main.EXIT_FAILURE

    def test_divergence_keeps_partial_log(self, tmp_path):
        config_path = tmp_path / "diverging.ini"
        config_path.write_text(TINY.format(epochs=2).replace("optimizer = sgd", "optimizer = sgd\ndivergence_threshold = 1e-9"))
        out = str(tmp_path / "out")
        assert main.run_cli(["train", "--config", str(config_path), "--out", out]) == main.EXIT_FAILURE
        directory = run_dir(str(config_path), out)
        log = read_table(os.path.join(directory, "constrained_train_log.csv"))
        assert len(log) == 0
        assert {"epoch", "batch", "f0", "lambda_1", "lambda_2"} <= set(log.columns)
        assert not os.path.isfile(os.path.join(directory, "constrained.ckpt"))


class TestSweep:
    def expected(self, config_path, out, checkpoints):
        config = ExperimentConfig.from_file(config_path)
        runner = main.ExperimentRunner(config, out)
        data = runner.prepare_data(0)
        eval_sets = split_id_ood(data.heldout, config.task.gamma_train, config.task.gamma_grid, data.sigma_x, 0)
        models = {load_checkpoint(p)[1]["model_tag"]: load_checkpoint(p)[0] for p in checkpoints}
        return config, sweep(models, eval_sets)

    def read_sweep(self, config, out):
        directory = os.path.join(out, f"{config.config_hash()[:12]}-sweep")
        return read_table(os.path.join(directory, "metrics.csv")), read_table(os.path.join(directory, "layer_losses.csv"))

    def test_matches_in_process(self, trained):
        config_path, out, checkpoints = trained
        args = ["sweep", "--config", config_path, "--out", out]
        for path in checkpoints:
            args += ["--checkpoint", path]
        assert main.run_cli(args) == main.EXIT_OK

        config, expected = self.expected(config_path, out, checkpoints)
        metrics, layer_losses = self.read_sweep(config, out)
        rebuilt = sweep_from_table(metrics)
        assert set(rebuilt) == {("constrained", 0), ("unconstrained", 0)}
        for tag, result in expected.items():
            assert rebuilt[(tag, 0)].metric == result.metric
            assert np.array_equal(rebuilt[(tag, 0)].layer_losses, result.layer_losses)
        assert len(layer_losses) == 2 * 2 * 3

    def test_checkpoint_order_does_not_change_results(self, trained):
        config_path, out, checkpoints = trained
        tables = []
        for order in (checkpoints, checkpoints[::-1]):
            args = ["sweep", "--config", config_path, "--out", out]
            for path in order:
                args += ["--checkpoint", path]
            assert main.run_cli(args) == main.EXIT_OK
            tables.append(sweep_from_table(self.read_sweep(ExperimentConfig.from_file(config_path), out)[0]))
        for key in tables[0]:
            assert tables[0][key].metric == tables[1][key].metric


class TestRatioReport:
    def test_histogram_matches_in_process(self, trained, capsys):
        config_path, out, checkpoints = trained
        assert main.run_cli(["ratio-report", "--config", config_path, "--out", out,
                             "--checkpoint", checkpoints[0]]) == main.EXIT_OK
        assert "descending" in capsys.readouterr().out

        config = ExperimentConfig.from_file(config_path)
        runner = main.ExperimentRunner(config, out)
        params, _ = load_checkpoint(checkpoints[0])
        stats = ratio_stats(params, runner.id_set(0), config.schedule().alpha)
        table = read_table(os.path.join(run_dir(config_path, out), "constrained_ratio_histogram.csv"))
        assert table["count"].tolist() == stats.counts.tolist()
        assert table["count"].sum() == stats.ratios.size
