"""
Unrolled Transformer Training

Unrolled transformer and sparse-coding networks trained either by plain
empirical risk minimization or under per-layer descent constraints with a
primal-dual method, plus the synthetic tasks, perturbation sweeps and
layer-wise diagnostics used to compare them.
"""

__version__ = "1.0.0"

from .config import Config
from .data_logger import DataLogger
from .experiment_config import ExperimentConfig
from .training_monitor import TrainingMonitor
from .trainer import ConstraintSchedule, DualState, TrainConfig, erm_train, train

__all__ = [
    'Config',
    'DataLogger',
    'ExperimentConfig',
    'TrainingMonitor',
    'ConstraintSchedule',
    'DualState',
    'TrainConfig',
    'train',
    'erm_train',
]
