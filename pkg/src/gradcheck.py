"""
Finite-difference verification of every differentiable operation and of the
composed model layers.

Each registered case draws random inputs in [-1, 1] (redrawn while any
nonlinearity input sits within the kink margin), reduces the case output to
a scalar through a fixed random projection and compares the tape gradients
with central differences.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    add,
    backward,
    cross_entropy,
    finite_diff_grad,
    frobenius_sq,
    matmul,
    mean,
    mul,
    reduce_sum,
    relu,
    reshape,
    soft_threshold,
    softmax_rows,
    sub,
    transpose,
)
from .exceptions import ContractError
from .models import (
    AttentionLayerParams,
    DustLayerParams,
    ReadoutParams,
    RELU,
    UTLayerParams,
    attention_forward,
    attention_weights,
    dust_layer_forward,
    layer_forward,
    readout_forward,
    ut_layer_forward,
)

logger = logging.getLogger(__name__)

GRADCHECK_STREAM = 11
MAX_REDRAWS = 1000


@dataclass
class GradcheckCase:
    """One differentiable computation to verify

    ``build`` maps the sampled inputs (Tensors for the ``wrt`` names, raw
    arrays otherwise) to an output tensor. ``kink_distance`` returns how
    close the sample is to a nondifferentiable point.
    """
    name: str
    sample: Callable[[np.random.Generator], Dict[str, np.ndarray]]
    build: Callable[[Dict[str, Any]], Tensor]
    wrt: Tuple[str, ...]
    kink_distance: Optional[Callable[[Dict[str, np.ndarray]], float]] = None


@dataclass
class GradcheckReport:
    name: str
    trials: int
    worst_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_error <= self.tolerance


REGISTRY: Dict[str, GradcheckCase] = {}


def register(case: GradcheckCase) -> GradcheckCase:
    if case.name in REGISTRY:
        raise ContractError(f"gradcheck case '{case.name}' registered twice")
    REGISTRY[case.name] = case
    return case


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """|a - n| / max(|a|, |n|, 1e-6) in the Euclidean norm"""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-6)
    return float(np.linalg.norm(analytic - numeric) / scale)


def _draw(case: GradcheckCase, rng: np.random.Generator, margin: float) -> Dict[str, np.ndarray]:
    for _ in range(MAX_REDRAWS):
        inputs = case.sample(rng)
        if case.kink_distance is None or case.kink_distance(inputs) > margin:
            return inputs
    raise ContractError(f"gradcheck case '{case.name}': no sample clear of kinks after {MAX_REDRAWS} draws")


def check_once(case: GradcheckCase, inputs: Dict[str, np.ndarray], rng: np.random.Generator, h: float = 1e-5) -> float:
    """Relative error between tape and finite-difference gradients for one sample"""
    direction = rng.uniform(-1.0, 1.0, size=case.build(dict(inputs)).shape)

    def scalar_loss(values: Dict[str, Any]) -> Tensor:
        return reduce_sum(mul(case.build(values), direction))

    leaves = {name: Tensor(inputs[name], requires_grad=True, name=name) for name in case.wrt}
    with Tape() as tape:
        loss = scalar_loss({**inputs, **leaves})
    backward(loss, tape, leaves.values())

    analytic, numeric = [], []
    for name in case.wrt:
        analytic.append(leaves[name].grad.reshape(-1))

        def along(x: Tensor, name=name) -> Tensor:
            return scalar_loss({**inputs, name: x})

        numeric.append(finite_diff_grad(along, Tensor(inputs[name]), h).data.reshape(-1))
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


def check_case(case: GradcheckCase, trials: int, tolerance: float, seed: int = 0,
               index: int = 0, margin: float = 1e-3) -> GradcheckReport:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(GRADCHECK_STREAM, index)))
    worst = 0.0
    for _ in range(trials):
        worst = max(worst, check_once(case, _draw(case, rng, margin), rng))
    return GradcheckReport(case.name, trials, worst, tolerance)


def run_suite(trials: int = 100, tolerance: float = 1e-4, seed: int = 0,
              names: Optional[Sequence[str]] = None) -> List[GradcheckReport]:
    """Check every registered case (or the named subset), one report each"""
    reports = []
    for index, (name, case) in enumerate(REGISTRY.items()):
        if names is not None and name not in names:
            continue
        report = check_case(case, trials, tolerance, seed, index)
        level = logging.INFO if report.passed else logging.ERROR
        logger.log(level, f"gradcheck {name}: worst relative error {report.worst_error:.3e} over {trials} trials")
        reports.append(report)
    return reports


def _uniform(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape)


def _generic_params(v: Dict[str, Any]) -> AttentionLayerParams:
    return AttentionLayerParams(*(v[name] for name in ("Q", "K", "V", "W", "U")))


def _generic_preactivation(v: Dict[str, np.ndarray]) -> np.ndarray:
    params = _generic_params({k: Tensor(a) for k, a in v.items()})
    z = attention_forward(v["X"], params)
    return add(matmul(params.W, z), matmul(params.U, v["X"])).data


def _ut_preactivation(v: Dict[str, np.ndarray]) -> np.ndarray:
    X = Tensor(v["X"])
    projected = matmul(v["W1"], X)
    half = matmul(X, attention_weights(matmul(transpose(projected), projected)))
    return (0.5 * (v["M"] + v["M"].T)) @ half.data


DUST_THRESHOLD = 0.3


def _dust_params(v: Dict[str, Any]) -> DustLayerParams:
    return DustLayerParams(v["D"], lambda1=DUST_THRESHOLD, lambda2=0.25, c=1.0)


def _dust_preactivation(v: Dict[str, np.ndarray]) -> np.ndarray:
    D, H, X = Tensor(v["D"]), Tensor(v["H"]), Tensor(v["X"])
    gram = matmul(transpose(D), D)
    attended = mul(matmul(H, attention_weights(matmul(transpose(H), matmul(gram, H)))), 0.25)
    return (attended.data - gram.data @ attended.data + v["D"].T @ v["X"])


register(GradcheckCase(
    "matmul",
    lambda rng: {"a": _uniform(rng, 3, 4), "b": _uniform(rng, 4, 2)},
    lambda v: matmul(v["a"], v["b"]),
    ("a", "b"),
))
register(GradcheckCase(
    "matmul_batched",
    lambda rng: {"w": _uniform(rng, 2, 3), "x": _uniform(rng, 4, 3, 2)},
    lambda v: matmul(v["w"], v["x"]),
    ("w", "x"),
))
register(GradcheckCase(
    "transpose",
    lambda rng: {"a": _uniform(rng, 2, 3, 4)},
    lambda v: transpose(v["a"]),
    ("a",),
))
register(GradcheckCase(
    "reshape",
    lambda rng: {"a": _uniform(rng, 2, 6)},
    lambda v: reshape(v["a"], (3, 4)),
    ("a",),
))
register(GradcheckCase(
    "add",
    lambda rng: {"a": _uniform(rng, 3, 2, 4), "b": _uniform(rng, 2, 4)},
    lambda v: add(v["a"], v["b"]),
    ("a", "b"),
))
register(GradcheckCase(
    "sub",
    lambda rng: {"a": _uniform(rng, 2, 4), "b": _uniform(rng, 1, 4)},
    lambda v: sub(v["a"], v["b"]),
    ("a", "b"),
))
register(GradcheckCase(
    "mul",
    lambda rng: {"a": _uniform(rng, 3, 2, 4), "b": _uniform(rng, 3, 1, 4)},
    lambda v: mul(v["a"], v["b"]),
    ("a", "b"),
))
register(GradcheckCase(
    "reduce_sum",
    lambda rng: {"a": _uniform(rng, 3, 2, 4)},
    lambda v: reduce_sum(v["a"], axis=(-2, -1)),
    ("a",),
))
register(GradcheckCase(
    "mean",
    lambda rng: {"a": _uniform(rng, 3, 4)},
    lambda v: mean(v["a"], axis=-1),
    ("a",),
))
register(GradcheckCase(
    "softmax_rows",
    lambda rng: {"a": _uniform(rng, 2, 3)},
    lambda v: softmax_rows(v["a"]),
    ("a",),
))
register(GradcheckCase(
    "relu",
    lambda rng: {"a": _uniform(rng, 3, 4)},
    lambda v: relu(v["a"]),
    ("a",),
    lambda v: float(np.min(np.abs(v["a"]))),
))
SOFT_THRESHOLD_GAMMA = 0.4
register(GradcheckCase(
    "soft_threshold",
    lambda rng: {"a": _uniform(rng, 3, 4)},
    lambda v: soft_threshold(v["a"], SOFT_THRESHOLD_GAMMA),
    ("a",),
    lambda v: float(np.min(np.abs(np.abs(v["a"]) - SOFT_THRESHOLD_GAMMA))),
))
register(GradcheckCase(
    "frobenius_sq",
    lambda rng: {"a": _uniform(rng, 2, 2)},
    lambda v: frobenius_sq(v["a"]),
    ("a",),
))
register(GradcheckCase(
    "cross_entropy",
    lambda rng: {"logits": _uniform(rng, 3, 4), "labels": rng.integers(0, 4, size=3)},
    lambda v: cross_entropy(softmax_rows(v["logits"]), v["labels"]),
    ("logits",),
))
register(GradcheckCase(
    "attention_forward",
    lambda rng: {"X": _uniform(rng, 3, 4), "Q": _uniform(rng, 2, 3), "K": _uniform(rng, 2, 3),
                 "V": _uniform(rng, 2, 3)},
    lambda v: attention_forward(v["X"], AttentionLayerParams(v["Q"], v["K"], v["V"], Tensor(np.zeros((3, 2))),
                                                             Tensor(np.zeros((3, 3))))),
    ("X", "Q", "K", "V"),
))
register(GradcheckCase(
    "layer_forward",
    lambda rng: {"X": _uniform(rng, 3, 4), "Q": _uniform(rng, 2, 3), "K": _uniform(rng, 2, 3),
                 "V": _uniform(rng, 2, 3), "W": _uniform(rng, 3, 2), "U": _uniform(rng, 3, 3)},
    lambda v: layer_forward(v["X"], _generic_params(v), RELU),
    ("Q", "K", "V", "W", "U"),
    lambda v: float(np.min(np.abs(_generic_preactivation(v)))),
))
register(GradcheckCase(
    "ut_layer_forward",
    lambda rng: {"X": _uniform(rng, 3, 4), "W1": _uniform(rng, 2, 3), "M": _uniform(rng, 3, 3)},
    lambda v: ut_layer_forward(v["X"], UTLayerParams(v["W1"], v["M"])),
    ("X", "W1", "M"),
    lambda v: float(np.min(np.abs(_ut_preactivation(v)))),
))
register(GradcheckCase(
    "dust_layer_forward",
    lambda rng: {"H": _uniform(rng, 5, 3), "X": _uniform(rng, 4, 3), "D": _uniform(rng, 4, 5)},
    lambda v: dust_layer_forward(v["H"], v["X"], _dust_params(v)),
    ("H", "X", "D"),
    lambda v: float(np.min(np.abs(np.abs(_dust_preactivation(v)) - DUST_THRESHOLD))),
))
register(GradcheckCase(
    "readout_forward",
    lambda rng: {"Y": _uniform(rng, 2, 3, 4), "R": _uniform(rng, 3, 3), "b": _uniform(rng, 3),
                 "labels": rng.integers(0, 3, size=2)},
    lambda v: cross_entropy(readout_forward(v["Y"], ReadoutParams(v["R"], v["b"])), v["labels"]),
    ("Y", "R", "b"),
))
