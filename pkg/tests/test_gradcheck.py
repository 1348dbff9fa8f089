import numpy as np
import pytest

from src import autodiff
from src.config import Config
from src.exceptions import ContractError
from src.gradcheck import REGISTRY, GradcheckCase, check_case, register, relative_error, run_suite

DIFFERENTIABLE_OPS = {
    "matmul", "transpose", "reshape", "add", "sub", "mul", "reduce_sum", "mean",
    "softmax_rows", "relu", "soft_threshold", "frobenius_sq", "cross_entropy",
}
COMPOSED = {"attention_forward", "layer_forward", "ut_layer_forward", "dust_layer_forward", "readout_forward"}


def test_registry_covers_every_op_and_layer():
    assert DIFFERENTIABLE_OPS | COMPOSED <= set(REGISTRY)


def test_suite_passes():
    assert Config.GRADCHECK_TRIALS >= 100
    reports = run_suite(trials=Config.GRADCHECK_TRIALS, tolerance=Config.GRADCHECK_TOLERANCE,
                        seed=Config.GRADCHECK_SEED)
    failing = {r.name: r.worst_error for r in reports if not r.passed}
    assert not failing


def test_suite_reports_each_case_once():
    reports = run_suite(trials=1)
    names = [r.name for r in reports]
    assert sorted(names) == sorted(REGISTRY)
    assert all(r.trials == 1 for r in reports)


def test_named_subset():
    reports = run_suite(trials=3, names=["relu", "matmul"])
    assert {r.name for r in reports} == {"relu", "matmul"}


def test_deterministic_for_a_seed():
    first = run_suite(trials=5, seed=3, names=["ut_layer_forward"])
    second = run_suite(trials=5, seed=3, names=["ut_layer_forward"])
    assert first[0].worst_error == second[0].worst_error


def test_corrupted_backward_rule_is_caught(monkeypatch):
    monkeypatch.setattr(autodiff.ReLU, "backward", lambda self, grad: (grad * 0.5,))
    reports = {r.name: r for r in run_suite(trials=5, names=["relu", "layer_forward", "matmul"])}
    assert not reports["relu"].passed
    assert not reports["layer_forward"].passed
    assert reports["matmul"].passed


def test_duplicate_registration_rejected():
    with pytest.raises(ContractError):
        register(REGISTRY["matmul"])


def test_kink_margin_redraws():
    case = GradcheckCase(
        "abs_like",
        lambda rng: {"a": rng.uniform(-1, 1, 4)},
        lambda v: autodiff.relu(v["a"]),
        ("a",),
        lambda v: float(np.min(np.abs(v["a"]))),
    )
    report = check_case(case, trials=20, tolerance=1e-4, margin=0.1)
    assert report.passed


def test_relative_error_scale_floor():
    assert relative_error(np.zeros(3), np.full(3, 1e-8)) == pytest.approx(np.sqrt(3) * 1e-8 / 1e-6)
    assert relative_error(np.ones(2), np.ones(2)) == 0.0
