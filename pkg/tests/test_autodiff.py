import numpy as np
import pytest

from treekit import autodiff as ad
from treekit.autodiff import Tape, Tensor, no_grad
from treekit.errors import ContractViolation, NumericAbort


@pytest.fixture
def debug_numerics():
    ad.set_debug_numerics(True)
    yield
    ad.set_debug_numerics(False)


class TestBackward:
    def test_shared_node_is_visited_once(self):
        x = Tensor(np.array([1.0, 2.0, -3.0]), requires_grad=True)
        y = x * x
        z = (y + y).sum()
        assert len(Tape(z)) == 4
        z.backward()
        np.testing.assert_allclose(x.grad, 4 * x.data)

    def test_grads_accumulate_until_zeroed(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        (x * 3.0).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_allclose(x.grad, [6.0])
        x.zero_grad()
        assert x.grad is None

    def test_gradients_leave_grad_untouched(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(2), requires_grad=True)
        gx, gu = ad.gradients(ad.sum_(ad.mul(x, x)), [x, unused])
        np.testing.assert_allclose(gx, [2.0, 2.0, 2.0])
        np.testing.assert_array_equal(gu, [0.0, 0.0])
        assert x.grad is None

    def test_broadcast_gradients_are_reduced(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        ad.backward(ad.sum_(ad.mul(a, b)))
        np.testing.assert_allclose(a.grad, [[1, 2, 3], [1, 2, 3]])
        np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])

    def test_matmul_gradient(self):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        b = Tensor(np.ones((3, 2)), requires_grad=True)
        ad.backward((a @ b).sum())
        np.testing.assert_allclose(a.grad, np.ones((2, 3)) * 2)
        np.testing.assert_allclose(b.grad, np.repeat(a.data.sum(axis=0)[:, None], 2, axis=1))

    def test_gather_accumulates_repeats(self):
        b = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
        ad.backward(ad.gather(b, np.array([1, 1, 3]), axis=0).sum())
        np.testing.assert_array_equal(b.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])

    def test_no_grad(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.is_leaf
        assert ad.grad_enabled()

    def test_contracts(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractViolation):
            ad.backward(x * 2.0)
        with pytest.raises(ContractViolation):
            ad.add(x, Tensor(np.ones(2)))
        with pytest.raises(ContractViolation):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ContractViolation):
            ad.gather(x, np.array([3]))

    def test_integer_input_becomes_float(self):
        assert Tensor(np.array([1, 2])).dtype == np.float64


class TestSoftmax:
    def test_masked_entries_are_zero(self):
        logits = Tensor(np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]]))
        mask = np.array([[True, False, True], [False, False, False]])
        y = ad.masked_softmax(logits, mask).data
        assert y[0, 1] == 0.0
        np.testing.assert_allclose(y[0].sum(), 1.0)
        np.testing.assert_array_equal(y[1], [0.0, 0.0, 0.0])

    def test_masked_logits_get_no_gradient(self):
        logits = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        mask = np.array([True, False, True])
        weights = np.array([1.0, 5.0, -1.0])
        ad.backward(ad.sum_(ad.mul(ad.masked_softmax(logits, mask), weights)))
        assert logits.grad[1] == 0.0

    def test_large_logits_are_stable(self):
        y = ad.softmax(Tensor(np.array([1000.0, 1000.0]))).data
        np.testing.assert_allclose(y, [0.5, 0.5])


class TestDebugNumerics:
    def test_non_finite_output_aborts(self, debug_numerics):
        with pytest.raises(NumericAbort) as info:
            ad.add(Tensor(np.array([np.inf])), 1.0)
        assert info.value.parameter == "add"

    def test_off_by_default(self):
        out = ad.add(Tensor(np.array([np.inf])), 1.0)
        assert np.isinf(out.data[0])

    def test_parameters_finite(self):
        assert ad.parameters_finite([Tensor(np.ones(2))])
        assert not ad.parameters_finite([Tensor(np.array([np.nan]))])
