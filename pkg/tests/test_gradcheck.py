import numpy as np
import pytest

from treekit import autodiff as ad
from treekit.autodiff import Tensor
from treekit.errors import ContractViolation
from treekit.gradcheck import (
    MAX_COORDINATES,
    grad_check,
    grad_check_report,
    model_loss_check,
    primitive_checks,
    relative_error,
)


class TestGradCheck:
    def test_relative_error_floor(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)
        assert relative_error(2.0, 1.0) == pytest.approx(0.5)

    def test_detects_a_wrong_gradient(self):
        x = Tensor(np.array([0.3, -1.2]), requires_grad=True)

        def broken() -> Tensor:
            # d/dx claims 2x while the value is x^3
            return ad.custom_op(np.array(np.sum(x.data ** 3)), (x,), lambda g: (g * 2 * x.data,), "cube")

        assert grad_check(broken, [x]) > 0.1

    def test_report_names_worst_coordinate(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
        report = grad_check_report(lambda: ad.sum_(ad.mul(x, x)), [x])
        assert report.coordinates == 4
        assert report.max_relative_error < 1e-8
        assert report.worst_parameter == 0

    def test_needs_float64(self):
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(ContractViolation):
            grad_check(lambda: ad.sum_(x), [x])

    def test_coordinate_budget(self):
        x = Tensor(np.random.default_rng(0).normal(size=50), requires_grad=True)
        report = grad_check_report(lambda: ad.sum_(ad.sigmoid(x)), [x], max_coords=7)
        assert report.coordinates == 7


class TestPrimitiveChecks:
    def test_every_primitive_matches_finite_differences(self):
        errors = primitive_checks(seed=0)
        assert set(errors) >= {"matmul", "gather", "scatter", "rms_norm", "masked_softmax", "composite"}
        worst = {name: err for name, err in errors.items() if err >= 1e-4}
        assert not worst


class TestModelLossCheck:
    def test_full_loss_gradient(self):
        report = model_loss_check(seed=0)
        assert report.coordinates == MAX_COORDINATES
        assert report.max_relative_error < 1e-4
