import numpy as np
import pytest

from src.data_logger import (
    HISTOGRAM_COLUMNS,
    LAYER_LOSS_COLUMNS,
    DataLogger,
    read_table,
    training_log_columns,
    write_table,
)
from src.data_tasks import ClassificationSet, DenoisingSet, gen_classification, gen_denoising
from src.evaluation import ratio_stats_from_losses


@pytest.fixture
def data_logger(tmp_path):
    return DataLogger(str(tmp_path / "run"))


def test_training_log_columns():
    assert training_log_columns(2) == [
        "epoch", "batch", "f0", "f1", "f2", "lambda_1", "lambda_2", "u_1", "u_2", "g_1", "g_2", "wall_ms",
    ]


def test_write_table_keeps_full_precision(tmp_path):
    value = 0.1 + 0.2
    path = write_table(str(tmp_path / "nested" / "t.csv"), [{"a": value, "b": "x"}], ["a", "b"])
    frame = read_table(path)
    assert frame["a"].iloc[0] == value
    with open(path, "rb") as f:
        assert b"\r\n" not in f.read()


def test_empty_table_has_header(tmp_path):
    path = write_table(str(tmp_path / "empty.csv"), [], LAYER_LOSS_COLUMNS)
    assert list(read_table(path).columns) == LAYER_LOSS_COLUMNS


def test_creates_run_directory(tmp_path):
    DataLogger(str(tmp_path / "a" / "b"))
    assert (tmp_path / "a" / "b").is_dir()


def test_save_config(data_logger):
    assert data_logger.save_config("[task]\nname = denoising\n")
    with open(data_logger.config_file) as f:
        assert f.read().startswith("[task]")


def test_log_training(data_logger):
    record = dict(zip(training_log_columns(1), [0, 0, 1.0, 0.5, 0.0, 0.0, -0.3, 0.0]))
    assert data_logger.log_training("constrained", [record], num_layers=1)
    frame = read_table(data_logger.training_log_path("constrained"))
    assert list(frame.columns) == training_log_columns(1)
    assert frame["g_1"].iloc[0] == -0.3


def test_ratio_histogram_overflow_bin(data_logger):
    stats = ratio_stats_from_losses(np.array([[1.0, 1.0, 1.0], [0.5, 1.5, 3.0]]))
    assert data_logger.log_ratio_histogram("constrained", stats.edges, stats.counts, stats.fractions, stats.cdf)
    frame = read_table(data_logger.path("constrained_ratio_histogram.csv"))
    assert list(frame.columns) == HISTOGRAM_COLUMNS
    assert len(frame) == 51
    assert np.isinf(float(frame["bin_right"].iloc[-1]))
    assert frame["count"].iloc[-1] == 1
    assert frame["count"].sum() == 3
    assert frame["cdf"].iloc[-1] == pytest.approx(1.0)


class TestDatasetCache:
    def test_denoising_round_trip(self, data_logger):
        clean = gen_denoising(6, 4, 3, "smooth", seed=2)
        assert data_logger.save_dataset("train.bin", DenoisingSet(clean, clean), seed=2)
        loaded = data_logger.load_dataset("train.bin")
        assert isinstance(loaded, DenoisingSet)
        assert np.array_equal(loaded.clean, clean)

    def test_classification_round_trip(self, data_logger):
        data = gen_classification(8, 4, 3, 3, 2.0, seed=1)
        assert data_logger.save_dataset("cls.bin", data, seed=1)
        loaded = data_logger.load_dataset("cls.bin")
        assert isinstance(loaded, ClassificationSet)
        assert np.array_equal(loaded.clean, data.clean)
        assert np.array_equal(loaded.labels, data.labels)
        assert loaded.num_classes == 3

    def test_missing_file(self, data_logger):
        assert data_logger.load_dataset("nope.bin") is None

    def test_corrupt_file(self, data_logger):
        with open(data_logger.path("bad.bin"), "wb") as f:
            f.write(b"NOTADATASET-----")
        assert data_logger.load_dataset("bad.bin") is None
