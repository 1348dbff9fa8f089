"""
Metrics on trained models: RMSE and accuracy, per-layer losses, per-sample
layer loss ratios, perturbation sweeps and their area under the curve.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from .data_tasks import EvalSet
from .exceptions import ParameterError, ShapeError
from .models import LayerTrace, LossContext, ModelParams, model_forward, predict_labels

logger = logging.getLogger(__name__)

RATIO_FLOOR = 1e-12
HISTOGRAM_BINS = 50
HISTOGRAM_UPPER = 2.0


def rmse(pred: Sequence[np.ndarray], truth: Sequence[np.ndarray]) -> float:
    """sqrt of the mean squared Frobenius error over samples"""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape[:1] != truth.shape[:1]:
        raise ShapeError(f"rmse: {pred.shape[0]} predictions for {truth.shape[0]} targets")
    if pred.shape != truth.shape:
        raise ShapeError(f"rmse: shapes {pred.shape} and {truth.shape} differ")
    if pred.shape[0] == 0:
        raise ParameterError("rmse of an empty set")
    diff = (pred - truth).reshape(pred.shape[0], -1)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def accuracy(pred: Sequence[int], truth: Sequence[int]) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"accuracy: {pred.shape} predictions for {truth.shape} labels")
    if pred.size == 0:
        raise ParameterError("accuracy of an empty set")
    return float(np.mean(pred == truth))


def _trace(params: ModelParams, data) -> LayerTrace:
    if len(data) == 0:
        raise ParameterError("cannot evaluate an empty set")
    return model_forward(data.inputs, params, LossContext(data.task, data.targets))


def layerwise_eval(params: ModelParams, data) -> List[float]:
    """Mean measured loss at the input and after every layer, one pass over the set"""
    return _trace(params, data).measured_losses()


def task_metric(params: ModelParams, data, trace: Optional[LayerTrace] = None) -> float:
    """RMSE of the final output (denoising) or accuracy of its readout (classification)"""
    trace = trace or _trace(params, data)
    final = trace.outputs[-1].data
    if data.task == "denoising":
        return rmse(final, data.targets)
    return accuracy(predict_labels(final, params.readout), data.targets)


def metric_name(task: str) -> str:
    return "rmse" if task == "denoising" else "accuracy"


@dataclass
class RatioStats:
    """Population of per-sample ratios f_l / f_{l-1} with its histogram

    The histogram has ``HISTOGRAM_BINS`` equal bins over [0, 2] plus one
    overflow bin for ratios above 2; ``fractions`` and ``cdf`` include it.
    """
    ratios: np.ndarray
    mean: float
    median: float
    fraction_descending: float
    fraction_target: Optional[float]
    alpha: Optional[Union[float, Tuple[float, ...]]]
    excluded: int
    edges: np.ndarray
    counts: np.ndarray
    fractions: np.ndarray
    cdf: np.ndarray

    def summary(self) -> Dict[str, Any]:
        return {
            "count": int(self.ratios.size),
            "excluded": self.excluded,
            "mean": self.mean,
            "median": self.median,
            "fraction_descending": self.fraction_descending,
            "fraction_target": self.fraction_target,
            "alpha": self.alpha,
        }


def _target_thresholds(alpha, numerators: np.ndarray) -> np.ndarray:
    """Per-entry threshold 1 - alpha_l broadcast over the (L, M) ratio grid"""
    alphas = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    if alphas.ndim != 1 or alphas.size not in (1, len(numerators)):
        raise ShapeError(f"ratio target: {alphas.size} descent factors for {len(numerators)} layers")
    return np.broadcast_to((1.0 - alphas)[:, None], numerators.shape)


def ratio_stats_from_losses(per_sample: np.ndarray,
                            alpha: Optional[Union[float, Sequence[float]]] = None,
                            bins: int = HISTOGRAM_BINS, upper: float = HISTOGRAM_UPPER) -> RatioStats:
    """Ratio statistics from an (L+1, M) per-sample loss array

    ``alpha`` is one descent factor or one per layer; each ratio f_l / f_{l-1}
    is held against its own layer's 1 - alpha_l.
    """
    per_sample = np.asarray(per_sample, dtype=np.float64)
    numerators, denominators = per_sample[1:], per_sample[:-1]
    kept = denominators > RATIO_FLOOR
    ratios = (numerators[kept] / denominators[kept]).reshape(-1)
    thresholds = _target_thresholds(alpha, numerators)[kept].reshape(-1) if alpha is not None else None
    if alpha is not None and np.ndim(alpha):
        alpha = tuple(float(a) for a in alpha)
    excluded = int(np.size(kept) - np.count_nonzero(kept))
    if excluded:
        logger.info(f"Excluded {excluded} layer steps with loss below {RATIO_FLOOR:g}")

    edges = np.linspace(0.0, upper, bins + 1)
    counts = np.zeros(bins + 1, dtype=np.int64)
    if ratios.size:
        counts[:bins] = np.histogram(ratios[ratios <= upper], bins=edges)[0]
        counts[bins] = int(np.count_nonzero(ratios > upper))
        fractions = counts / ratios.size
        mean, median = float(np.mean(ratios)), float(np.median(ratios))
        descending = float(np.mean(ratios < 1.0))
        target = float(np.mean(ratios <= thresholds)) if thresholds is not None else None
    else:
        fractions = np.zeros(bins + 1)
        mean = median = math.nan
        descending = 0.0
        target = 0.0 if alpha is not None else None
    return RatioStats(
        ratios=ratios, mean=mean, median=median, fraction_descending=descending,
        fraction_target=target, alpha=alpha, excluded=excluded, edges=edges,
        counts=counts, fractions=fractions, cdf=np.cumsum(fractions),
    )


def ratio_stats(params: ModelParams, data,
                alpha: Optional[Union[float, Sequence[float]]] = None) -> RatioStats:
    """Per-sample layer loss ratios over an evaluation set"""
    return ratio_stats_from_losses(_trace(params, data).per_sample(), alpha)


def auc(gammas: Sequence[float], values: Sequence[float]) -> Tuple[float, float]:
    """Trapezoid area over the grid and the same area divided by the grid span

    A single-point grid has zero area; its normalized value is that point.
    """
    gammas = np.asarray(gammas, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if gammas.shape != values.shape or gammas.size == 0:
        raise ShapeError(f"auc: {gammas.size} grid points for {values.size} values")
    if np.any(np.diff(gammas) <= 0):
        raise ParameterError("auc: grid must be strictly ascending")
    if gammas.size == 1:
        return 0.0, float(values[0])
    raw = float(trapezoid(values, gammas))
    return raw, raw / float(gammas[-1] - gammas[0])


@dataclass
class SweepResult:
    """Metric and per-layer losses of one model across the perturbation grid"""
    model_tag: str
    metric_name: str
    gammas: List[float]
    metric: List[float]
    layer_losses: np.ndarray  # (L+1, len(gammas))
    in_distribution: List[bool] = field(default_factory=list)

    def auc(self) -> Tuple[float, float]:
        return auc(self.gammas, self.metric)

    def mean_metric(self) -> float:
        return float(np.mean(self.metric))


def sweep(models: Dict[str, ModelParams], eval_sets: Sequence[EvalSet]) -> Dict[str, SweepResult]:
    """Evaluate every model on every perturbation level (one pass per set)"""
    eval_sets = sorted(eval_sets, key=lambda s: s.gamma)
    if not eval_sets:
        raise ParameterError("sweep needs at least one evaluation set")
    results = {}
    for tag, params in models.items():
        metrics, losses = [], []
        for eval_set in eval_sets:
            trace = _trace(params, eval_set.data)
            metrics.append(task_metric(params, eval_set.data, trace))
            losses.append(trace.measured_losses())
        name = metric_name(eval_sets[0].data.task)
        results[tag] = SweepResult(
            model_tag=tag, metric_name=name, gammas=[s.gamma for s in eval_sets], metric=metrics,
            layer_losses=np.array(losses).T, in_distribution=[s.in_distribution for s in eval_sets],
        )
        raw, normalized = results[tag].auc()
        logger.info(f"Sweep {tag}: {name} AUC raw={raw:.6g} normalized={normalized:.6g}")
    return results


def metrics_rows(results: Dict[str, SweepResult], seed: int) -> List[Dict[str, Any]]:
    """Metrics CSV rows: per gamma and layer, then raw/normalized AUC and the grid mean"""
    rows = []
    for tag, result in results.items():
        for j, gamma in enumerate(result.gammas):
            for layer in range(result.layer_losses.shape[0]):
                rows.append({
                    "gamma": gamma, "metric": result.metric[j], "auc_flag": "", "layer_index": layer,
                    "mean_loss": float(result.layer_losses[layer, j]), "model_tag": tag, "seed": seed,
                })
        raw, normalized = result.auc()
        for flag, value in (("raw", raw), ("normalized", normalized), ("mean", result.mean_metric())):
            rows.append({
                "gamma": None, "metric": value, "auc_flag": flag, "layer_index": -1,
                "mean_loss": None, "model_tag": tag, "seed": seed,
            })
    return rows


def layer_loss_rows(results: Dict[str, SweepResult], seed: int) -> List[Dict[str, Any]]:
    rows = []
    for tag, result in results.items():
        for j, gamma in enumerate(result.gammas):
            for layer in range(result.layer_losses.shape[0]):
                rows.append({
                    "model_tag": tag, "seed": seed, "gamma": gamma,
                    "in_distribution": bool(result.in_distribution[j]) if result.in_distribution else None,
                    "layer_index": layer, "mean_loss": float(result.layer_losses[layer, j]),
                })
    return rows


def sweep_from_table(frame: pd.DataFrame, metric: str = "rmse") -> Dict[Tuple[str, int], SweepResult]:
    """Rebuild sweep results from a metrics table, keyed by (model_tag, seed)"""
    results = {}
    points = frame[frame["layer_index"] >= 0]
    for (tag, seed), group in points.groupby(["model_tag", "seed"], sort=False):
        gammas = sorted(group["gamma"].unique())
        layers = int(group["layer_index"].max()) + 1
        losses = np.zeros((layers, len(gammas)))
        values = []
        for j, gamma in enumerate(gammas):
            at_gamma = group[group["gamma"] == gamma].sort_values("layer_index")
            losses[:, j] = at_gamma["mean_loss"].to_numpy()
            values.append(float(at_gamma["metric"].iloc[0]))
        results[(tag, int(seed))] = SweepResult(tag, metric, [float(g) for g in gammas], values, losses)
    return results


@dataclass
class SeedSummary:
    """Mean and standard deviation across seeds for one model tag"""
    model_tag: str
    seeds: int
    auc_raw: Tuple[float, float]
    auc_normalized: Tuple[float, float]
    mean_metric: Tuple[float, float]
    metric_by_gamma: Dict[float, Tuple[float, float]]


def _mean_sd(values: Sequence[float]) -> Tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(np.mean(values)), sd


def aggregate_seeds(results: Sequence[SweepResult]) -> SeedSummary:
    """Multi-seed mean +- sd of the AUCs, the grid mean and each gamma's metric"""
    if not results:
        raise ParameterError("nothing to aggregate")
    gammas = results[0].gammas
    if any(r.gammas != gammas for r in results):
        raise ParameterError("sweep grids differ across seeds")
    aucs = [r.auc() for r in results]
    return SeedSummary(
        model_tag=results[0].model_tag,
        seeds=len(results),
        auc_raw=_mean_sd([a[0] for a in aucs]),
        auc_normalized=_mean_sd([a[1] for a in aucs]),
        mean_metric=_mean_sd([r.mean_metric() for r in results]),
        metric_by_gamma={g: _mean_sd([r.metric[j] for r in results]) for j, g in enumerate(gammas)},
    )
