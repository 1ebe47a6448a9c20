import numpy as np
import pytest

from group_transformer.core import tensor as T
from group_transformer.core.gradcheck import (
    MODEL_TOLERANCE,
    OP_TOLERANCE,
    grad_check,
    model_check,
    module_checks,
    op_checks,
    run_suite,
)
from group_transformer.core.tensor import parameter
from group_transformer.models import ArchConfig


def test_sum_has_zero_error():
    point = parameter(np.random.default_rng(0).uniform(0, 1, 3))
    assert grad_check(lambda x: T.sum(x), [point]) < 1e-8


def test_sigmoid_of_sum_at_zero():
    point = parameter([0.0])
    assert grad_check(lambda x: T.sum(T.sigmoid(T.sum(x))), [point]) < 1e-8


def test_linear_weight_gradient_matches_differences():
    rng = np.random.default_rng(1)
    x, W, b = parameter(rng.standard_normal((2, 3))), parameter(rng.standard_normal((3, 2))), parameter(np.zeros(2))
    assert grad_check(lambda x, W, b: T.sum(T.linear(x, W, b)), [x, W, b]) < 1e-4


def test_detects_a_wrong_gradient():
    x = parameter([0.3, -0.7])

    def broken(x):
        out = T.sum(x * x)
        rule = out._backward
        out._backward = lambda g: tuple(2 * p for p in rule(g))
        return out

    assert grad_check(broken, [x]) > 0.1


@pytest.mark.parametrize("seed", range(10))
def test_every_operation_passes(seed):
    errors = op_checks(seed)
    assert errors
    for name, error in errors.items():
        assert error < OP_TOLERANCE, name


@pytest.mark.parametrize("seed", range(10))
def test_model_components_pass(seed):
    for name, error in module_checks(seed).items():
        assert error < OP_TOLERANCE, name


@pytest.mark.parametrize("seed", range(3))
def test_full_tiny_model_passes(seed):
    assert model_check(seed) < MODEL_TOLERANCE


def test_full_tiny_model_passes_on_every_parameter_entry():
    assert model_check(0, samples=None) < MODEL_TOLERANCE


def test_exhaustive_suite_reports_full_model():
    results = run_suite(1, exhaustive=True)
    full = [r for r in results if r.name == "full_model"]
    assert len(full) == 1
    assert full[0].passed, full[0].error


@pytest.mark.parametrize("variant", ["no_occlusion", "no_transformer", "no_appearance"])
def test_ablation_variants_pass(variant):
    assert model_check(0, ArchConfig.tiny(variant=variant)) < MODEL_TOLERANCE


@pytest.mark.slow
def test_full_suite_over_ten_seeds():
    results = run_suite(10)
    assert all(r.passed for r in results), [r.name for r in results if not r.passed]
