import json
import logging
import os
import struct
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .data_tasks import ClassificationSet, DenoisingSet

DATASET_MAGIC = b"UTRNDATA"
DATASET_VERSION = 1
_DATASET_PREFIX = struct.Struct("<8sII")

logger = logging.getLogger(__name__)


def training_log_columns(num_layers: int) -> List[str]:
    """Column order of the per-batch training log"""
    columns = ["epoch", "batch"]
    columns += [f"f{l}" for l in range(num_layers + 1)]
    columns += [f"lambda_{l}" for l in range(1, num_layers + 1)]
    columns += [f"u_{l}" for l in range(1, num_layers + 1)]
    columns += [f"g_{l}" for l in range(1, num_layers + 1)]
    columns.append("wall_ms")
    return columns


METRICS_COLUMNS = ["gamma", "metric", "auc_flag", "layer_index", "mean_loss", "model_tag", "seed"]
LAYER_LOSS_COLUMNS = ["model_tag", "seed", "gamma", "in_distribution", "layer_index", "mean_loss"]
HISTOGRAM_COLUMNS = ["bin_left", "bin_right", "count", "fraction", "cdf"]


def write_table(path: str, records: Sequence[Dict[str, Any]], columns: Sequence[str]) -> str:
    """CSV with a header row; floats keep full repr precision"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame = pd.DataFrame(list(records), columns=list(columns))
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def read_table(path: str) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip", keep_default_na=False, na_values=[""])


def write_training_log(path: str, records: Sequence[Dict[str, Any]], num_layers: int) -> str:
    return write_table(path, records, training_log_columns(num_layers))


class DataLogger:
    """Writes every artifact of one run into its run directory"""

    def __init__(self, data_directory: str = 'runs'):
        self.data_directory = data_directory
        self.logger = logging.getLogger(__name__)

        # Ensure run directory exists
        os.makedirs(data_directory, exist_ok=True)

        self.config_file = os.path.join(data_directory, 'config.ini')
        self.metrics_file = os.path.join(data_directory, 'metrics.csv')
        self.layer_loss_file = os.path.join(data_directory, 'layer_losses.csv')

    def path(self, filename: str) -> str:
        return os.path.join(self.data_directory, filename)

    def checkpoint_path(self, variant: str) -> str:
        return self.path(f"{variant}.ckpt")

    def training_log_path(self, variant: str) -> str:
        return self.path(f"{variant}_train_log.csv")

    def save_config(self, text: str) -> bool:
        """Keep a copy of the experiment config next to its results"""
        try:
            with open(self.config_file, 'w', newline="\n") as f:
                f.write(text)
            return True
        except OSError as e:
            self.logger.error(f"Error saving config copy {self.config_file}: {e}")
            return False

    def log_training(self, variant: str, records: Sequence[Dict[str, Any]], num_layers: int) -> bool:
        """Write the per-batch training log of one variant"""
        try:
            write_training_log(self.training_log_path(variant), records, num_layers)
            self.logger.info(f"Training log for {variant}: {len(records)} batches")
            return True
        except OSError as e:
            self.logger.error(f"Error writing training log for {variant}: {e}")
            return False

    def log_metrics(self, rows: Sequence[Dict[str, Any]], filename: Optional[str] = None) -> bool:
        """Write the sweep metrics table (per-gamma metric, AUC rows, per-layer losses)"""
        target = self.path(filename) if filename else self.metrics_file
        try:
            write_table(target, rows, METRICS_COLUMNS)
            self.logger.info(f"Metrics written to {target} ({len(rows)} rows)")
            return True
        except OSError as e:
            self.logger.error(f"Error writing metrics {target}: {e}")
            return False

    def log_layer_losses(self, rows: Sequence[Dict[str, Any]]) -> bool:
        try:
            write_table(self.layer_loss_file, rows, LAYER_LOSS_COLUMNS)
            return True
        except OSError as e:
            self.logger.error(f"Error writing layer losses {self.layer_loss_file}: {e}")
            return False

    def log_ratio_histogram(self, variant: str, edges: np.ndarray, counts: np.ndarray,
                            fractions: np.ndarray, cdf: np.ndarray) -> bool:
        """Histogram of per-sample layer loss ratios; the last bin is the overflow above the grid"""
        rows = []
        for i, count in enumerate(counts):
            right = edges[i + 1] if i + 1 < len(edges) else float("inf")
            rows.append({
                "bin_left": float(edges[i]),
                "bin_right": float(right),
                "count": int(count),
                "fraction": float(fractions[i]),
                "cdf": float(cdf[i]),
            })
        target = self.path(f"{variant}_ratio_histogram.csv")
        try:
            write_table(target, rows, HISTOGRAM_COLUMNS)
            return True
        except OSError as e:
            self.logger.error(f"Error writing ratio histogram {target}: {e}")
            return False

    def save_dataset(self, filename: str, data, seed: int) -> bool:
        """Cache clean data (and labels) behind a small self-describing header"""
        header = {
            "format_version": DATASET_VERSION,
            "task": data.task,
            "n": int(data.clean.shape[1]),
            "t": int(data.clean.shape[2]),
            "num_classes": getattr(data, "num_classes", None),
            "count": len(data),
            "seed": seed,
        }
        encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = np.ascontiguousarray(data.clean, dtype="<f8").tobytes()
        if isinstance(data, ClassificationSet):
            payload += np.ascontiguousarray(data.labels, dtype="<i8").tobytes()
        try:
            with open(self.path(filename), 'wb') as f:
                f.write(_DATASET_PREFIX.pack(DATASET_MAGIC, DATASET_VERSION, len(encoded)) + encoded + payload)
            return True
        except OSError as e:
            self.logger.error(f"Error caching dataset {filename}: {e}")
            return False

    def load_dataset(self, filename: str):
        """Read a cached dataset back; returns None when missing or unreadable"""
        try:
            with open(self.path(filename), 'rb') as f:
                blob = f.read()
        except OSError:
            return None
        try:
            magic, version, length = _DATASET_PREFIX.unpack_from(blob)
            if magic != DATASET_MAGIC or version != DATASET_VERSION:
                raise ValueError(f"unsupported dataset cache {magic!r} v{version}")
            start = _DATASET_PREFIX.size
            header = json.loads(blob[start:start + length].decode("utf-8"))
            shape = (header["count"], header["n"], header["t"])
            offset = start + length
            values = int(np.prod(shape))
            clean = np.frombuffer(blob, dtype="<f8", count=values, offset=offset).astype(np.float64).reshape(shape)
            if header["task"] == "classification":
                labels = np.frombuffer(blob, dtype="<i8", count=shape[0], offset=offset + 8 * values).astype(np.int64)
                return ClassificationSet(clean=clean, embeddings=clean.copy(), labels=labels,
                                         num_classes=header["num_classes"])
            return DenoisingSet(clean=clean, noisy=clean.copy())
        except (ValueError, KeyError, struct.error) as e:
            self.logger.error(f"Error loading dataset cache {filename}: {e}")
            return None
