"""
Primal-dual training under layerwise descent constraints.

Each layer must reduce the expected loss by a factor: f_l <= (1 - alpha_l) f_{l-1}.
The trainer minimizes the Lagrangian over the model parameters, then takes a
projected ascent step on the multipliers with the batch constraint values.
Resilient relaxation either keeps explicit slacks u (quadratic cost beta/2)
or folds them into a weight-decayed multiplier update.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .autodiff import Tape, Tensor, add, as_tensor, backward, mul, sub
from .data_logger import write_training_log
from .exceptions import (
    ContractError,
    NonFiniteGradientError,
    NonFiniteValueError,
    ParameterError,
    ShapeError,
    TrainingDivergedError,
)
from .models import LayerTrace, LossContext, model_forward
from .optimizers import make_optimizer
from .training_monitor import TrainingMonitor

logger = logging.getLogger(__name__)

RESILIENT_MODES = ("off", "explicit_slack", "weight_decay")
SHUFFLE_STREAM = 21


@dataclass
class ConstraintSchedule:
    """Descent factor per layer and the reference loss for the first constraint"""
    alpha: List[float]
    f0: float = 1.0
    use_f0_for_first: bool = False

    def __post_init__(self):
        self.alpha = [float(a) for a in self.alpha]
        if not self.alpha:
            raise ParameterError("constraint schedule needs at least one layer")
        if not all(math.isfinite(a) for a in self.alpha):
            raise ParameterError(f"descent factors must be finite, got {self.alpha}")
        if not self.f0 > 0:
            raise ParameterError(f"reference loss f0 must be positive, got {self.f0}")
        outside = [a for a in self.alpha if not 0.0 < a < 1.0]
        if outside:
            logger.warning(f"Descent factors outside (0, 1): {outside}; constraints may be infeasible or vacuous")

    @classmethod
    def constant(cls, alpha: float, layers: int, f0: float = 1.0, use_f0_for_first: bool = False):
        return cls([alpha] * layers, f0, use_f0_for_first)

    @property
    def num_layers(self) -> int:
        return len(self.alpha)


@dataclass
class DualState:
    """Multipliers, resilience slacks and the dual step settings"""
    lam: np.ndarray
    slack_u: np.ndarray
    beta: float = 1.0
    eta2: float = 3e-2
    resilient_mode: str = "off"
    literal_decay: bool = False
    slack_lr: Optional[float] = None

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        self.slack_u = np.asarray(self.slack_u, dtype=np.float64)
        if self.lam.shape != self.slack_u.shape:
            raise ShapeError(f"multipliers {self.lam.shape} and slacks {self.slack_u.shape} differ")
        if self.resilient_mode not in RESILIENT_MODES:
            raise ParameterError(f"unknown resilient mode '{self.resilient_mode}'")
        if not self.beta > 0:
            raise ParameterError(f"resilience coefficient beta must be positive, got {self.beta}")
        if not self.eta2 > 0:
            raise ParameterError(f"dual step size must be positive, got {self.eta2}")

    @classmethod
    def zeros(cls, layers: int, **settings) -> "DualState":
        return cls(np.zeros(layers), np.zeros(layers), **settings)

    def copy(self) -> "DualState":
        return replace(self, lam=self.lam.copy(), slack_u=self.slack_u.copy())

    def optimal_slack(self) -> np.ndarray:
        """Minimizer of (beta/2)|u|^2 - u.lam over u >= 0"""
        return np.maximum(self.lam, 0.0) / self.beta


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    eta1: float = 3e-4
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    primal_warmup_epochs: int = 0
    resilience_restart_each_epoch: bool = False
    seed: int = 0
    record_wall_time: bool = False
    divergence_threshold: float = 1e12

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError(f"epochs must be nonnegative, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch size must be at least 1, got {self.batch_size}")
        if not self.eta1 > 0:
            raise ParameterError(f"primal step size must be positive, got {self.eta1}")
        if self.primal_warmup_epochs < 0:
            raise ParameterError("primal warmup epochs must be nonnegative")


@dataclass
class TrainResult:
    params: Any
    log: List[Dict[str, float]]
    dual: DualState
    alerts: Dict = field(default_factory=dict)

    @property
    def final_losses(self) -> List[float]:
        if not self.log:
            return []
        last = self.log[-1]
        return [last[f"f{l}"] for l in range(self.dual.lam.size + 1)]


LossValues = Union[LayerTrace, Sequence[float]]


def _reference_means(trace: LayerTrace, sched: ConstraintSchedule) -> List[Tensor]:
    means = [as_tensor(m) if not isinstance(m, Tensor) else m for m in trace.mean_losses()]
    if sched.use_f0_for_first:
        means[0] = as_tensor(float(sched.f0))
    return means


def _loss_values(losses: LossValues, sched: ConstraintSchedule) -> np.ndarray:
    if isinstance(losses, LayerTrace):
        values = np.array([m.item() for m in _reference_means(losses, sched)])
    else:
        values = np.asarray(losses, dtype=np.float64).copy()
        if sched.use_f0_for_first:
            values[0] = sched.f0
    return values


def constraint_slacks(losses: LossValues, sched: ConstraintSchedule,
                      u: Optional[Sequence[float]] = None) -> np.ndarray:
    """g_l = f_l - (1 - alpha_l) f_{l-1} - u_l from batch-mean losses; g_l <= 0 is satisfied"""
    values = _loss_values(losses, sched)
    layers = sched.num_layers
    if values.size != layers + 1:
        raise ShapeError(f"expected {layers + 1} layer losses, got {values.size}")
    slack = np.zeros(layers) if u is None else np.asarray(u, dtype=np.float64)
    if slack.shape != (layers,):
        raise ShapeError(f"expected {layers} slacks, got shape {slack.shape}")
    alpha = np.asarray(sched.alpha)
    return values[1:] - (1.0 - alpha) * values[:-1] - slack


def lagrangian(trace: LayerTrace, lam: Sequence[float], sched: ConstraintSchedule,
               u: Optional[Sequence[float]] = None, beta: float = 1.0,
               resilient_mode: str = "off") -> Tensor:
    """f_L + sum_l lam_l [f_l - (1 - alpha_l) f_{l-1}], plus beta/2 |u|^2 - u.lam with explicit slacks

    Terms whose multiplier is exactly zero are skipped, so lam = 0 yields
    the plain final-layer loss.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0):
        raise ContractError(f"multipliers must be nonnegative, got {lam}")
    means = _reference_means(trace, sched)
    if len(means) != sched.num_layers + 1 or lam.size != sched.num_layers:
        raise ShapeError(f"trace has {len(means)} losses, schedule {sched.num_layers} layers, lam {lam.size}")
    total = means[-1]
    for l in range(1, sched.num_layers + 1):
        weight = float(lam[l - 1])
        if weight == 0.0:
            continue
        term = sub(means[l], mul(means[l - 1], 1.0 - sched.alpha[l - 1]))
        total = add(total, mul(term, weight))
    if resilient_mode == "explicit_slack":
        slack = np.zeros_like(lam) if u is None else np.asarray(u, dtype=np.float64)
        total = add(total, 0.5 * beta * float(slack @ slack) - float(slack @ lam))
    elif resilient_mode not in RESILIENT_MODES:
        raise ParameterError(f"unknown resilient mode '{resilient_mode}'")
    return total


def dual_step(dual: DualState, g: Sequence[float]) -> DualState:
    """Projected ascent on the multipliers; weight_decay mode shrinks lam first"""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != dual.lam.shape:
        raise ShapeError(f"constraint values {g.shape} do not match multipliers {dual.lam.shape}")
    if dual.resilient_mode == "weight_decay":
        decay = 1.0 - (1.0 / dual.beta if dual.literal_decay else dual.eta2 / dual.beta)
        lam = decay * dual.lam + dual.eta2 * g
    else:
        lam = dual.lam + dual.eta2 * g
    return replace(dual, lam=np.maximum(lam, 0.0), slack_u=dual.slack_u.copy())


def resilient_slack_step(u: Sequence[float], lam: Sequence[float], beta: float, eta: float) -> np.ndarray:
    """u <- max(0, u - eta (beta u - lam)); fixed point u = lam / beta"""
    u = np.asarray(u, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    return np.maximum(u - eta * (beta * u - lam), 0.0)


Forward = Callable[[Any, np.ndarray, LossContext], LayerTrace]


def _default_forward(params, X, ctx) -> LayerTrace:
    return model_forward(X, params, ctx)


def _flush(log_path: Optional[str], records: List[Dict[str, float]], layers: int):
    if log_path:
        write_training_log(log_path, records, layers)


def train(params, data, sched: ConstraintSchedule, dual: DualState, cfg: TrainConfig,
          forward: Optional[Forward] = None, log_path: Optional[str] = None,
          monitor: Optional[TrainingMonitor] = None, constrained: bool = True) -> TrainResult:
    """Primal-dual training loop

    Per batch: forward trace, Lagrangian, backward, primal step, constraint
    values g, slack step (explicit_slack), dual step. Multipliers stay at
    zero during the primal warmup epochs. ``constrained=False`` pins them at
    zero throughout (the unconstrained baseline).
    """
    forward = forward or _default_forward
    layers = sched.num_layers
    if dual.lam.size != layers:
        raise ShapeError(f"dual state has {dual.lam.size} multipliers for {layers} layers")
    dual = dual.copy()
    monitor = monitor or TrainingMonitor(divergence_threshold=cfg.divergence_threshold)
    blocks = params.named_blocks()
    optimizer = make_optimizer(cfg.optimizer, blocks, cfg.eta1, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    slack_lr = dual.slack_lr if dual.slack_lr is not None else dual.eta2
    f0 = sched.f0 if sched.use_f0_for_first else None
    records: List[Dict[str, float]] = []
    count = len(data)
    logger.info(f"Training {'constrained' if constrained else 'unconstrained'} model: "
                f"{cfg.epochs} epochs, {count} samples, batch {cfg.batch_size}, mode {dual.resilient_mode}")

    for epoch in range(cfg.epochs):
        active = constrained and epoch >= cfg.primal_warmup_epochs
        order = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(SHUFFLE_STREAM, epoch))).permutation(count)
        for batch, start in enumerate(range(0, count, cfg.batch_size)):
            started = time.perf_counter()
            idx = order[start:start + cfg.batch_size]
            ctx = LossContext(data.task, data.targets[idx], f0)
            lam = dual.lam if active else np.zeros(layers)
            mode = dual.resilient_mode if active else "off"
            try:
                with Tape() as tape:
                    trace = forward(params, data.inputs[idx], ctx)
                    objective = lagrangian(trace, lam, sched, dual.slack_u, dual.beta, mode)
            except NonFiniteValueError as e:
                _flush(log_path, records, layers)
                raise TrainingDivergedError(f"epoch {epoch} batch {batch}: {e}", records) from e

            values = _loss_values(trace, sched)
            if not np.all(np.isfinite(values)) or abs(values[-1]) > cfg.divergence_threshold \
                    or abs(objective.item()) > cfg.divergence_threshold:
                monitor.process_batch(values, np.zeros(layers), constraints_active=False)
                _flush(log_path, records, layers)
                raise TrainingDivergedError(
                    f"epoch {epoch} batch {batch}: loss {values[-1]!r} exceeds {cfg.divergence_threshold:g}", records)

            optimizer.zero_grad()
            backward(objective, tape, blocks.values())
            try:
                optimizer.step()
            except NonFiniteGradientError as e:
                _flush(log_path, records, layers)
                e.log = records
                raise

            g = constraint_slacks(values, sched, dual.slack_u)
            if active:
                if dual.resilient_mode == "explicit_slack":
                    dual.slack_u = resilient_slack_step(dual.slack_u, dual.lam, dual.beta, slack_lr)
                dual = dual_step(dual, g)

            record: Dict[str, float] = {"epoch": epoch, "batch": batch}
            record.update({f"f{l}": float(values[l]) for l in range(layers + 1)})
            record.update({f"lambda_{l + 1}": float(dual.lam[l]) for l in range(layers)})
            record.update({f"u_{l + 1}": float(dual.slack_u[l]) for l in range(layers)})
            record.update({f"g_{l + 1}": float(g[l]) for l in range(layers)})
            record["wall_ms"] = (time.perf_counter() - started) * 1000.0 if cfg.record_wall_time else 0.0
            records.append(record)
            monitor.process_batch(values, g, dual.slack_u if dual.resilient_mode == "explicit_slack" else None,
                                  constraints_active=active)

        if cfg.resilience_restart_each_epoch:
            dual.slack_u = np.zeros(layers)
        if records:
            last = records[-1]
            logger.debug(f"epoch {epoch}: final loss {last[f'f{layers}']:.6g}, max g "
                         f"{max(last[f'g_{l}'] for l in range(1, layers + 1)):.4g}")

    _flush(log_path, records, layers)
    return TrainResult(params=params, log=records, dual=dual, alerts=monitor.get_alert_summary())


def erm_train(params, data, cfg: TrainConfig, sched: Optional[ConstraintSchedule] = None,
              forward: Optional[Forward] = None, log_path: Optional[str] = None,
              monitor: Optional[TrainingMonitor] = None) -> TrainResult:
    """Unconstrained baseline: the same loop with multipliers pinned at zero

    ``sched`` only affects the logged constraint values g.
    """
    if sched is None:
        sched = ConstraintSchedule([0.0] * params.num_layers)
    dual = DualState.zeros(sched.num_layers)
    return train(params, data, sched, dual, cfg, forward, log_path, monitor, constrained=False)
