import numpy as np
import pytest

from pong.exceptions import GradientError
from pong.gradcheck import (
    WIDE_TOLERANCE,
    check_model_gradients,
    grad_check,
    relative_error,
)
from pong.model import PoNG
from pong.tensor import Tensor


def test_relative_error_scale():
    assert relative_error(0.5, 0.25) == 0.25
    assert relative_error(100.0, 99.0) == pytest.approx(0.01)


def test_grad_check_catches_a_wrong_gradient(wide):
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    # detaching hides one branch of the product from backward
    assert grad_check(lambda x: (x * x.detach()).sum(), x) > 0.5


def test_grad_check_needs_a_leaf_with_gradient():
    with pytest.raises(GradientError):
        grad_check(lambda x: x.sum(), Tensor(np.ones(2)))
    with pytest.raises(ValueError):
        grad_check(lambda x: x.sum(), Tensor(np.ones(2), requires_grad=True), step=0)


def test_grad_check_rejects_nondeterministic_functions(wide):
    rng = np.random.default_rng(0)
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(GradientError):
        grad_check(lambda x: (x * rng.normal()).sum(), x)


@pytest.mark.parametrize("ablations", [(), ("tcn",), ("p3p4",), ("p1p2",)])
def test_model_gradients(ablations):
    config = pytest.helpers.tiny_config().ablate(ablations)
    model = PoNG(config, seed=0)
    report = check_model_gradients(model, samples=20, batch=2, seed=1)
    assert len(report.entries) == 20
    assert report.passed, report.max_error
    assert report.max_error < WIDE_TOLERANCE


def test_model_gradient_check_restores_running_statistics():
    config = pytest.helpers.tiny_config()
    model = PoNG(config, seed=0)
    check_model_gradients(model, samples=3, batch=2)
    before = {name: array.copy() for name, (_, array) in model.state().items()}
    check_model_gradients(model, samples=3, batch=2)
    for name, (_, array) in model.state().items():
        np.testing.assert_array_equal(array, before[name], err_msg=name)
