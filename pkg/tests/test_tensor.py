import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kunet.errors import ContractError, DimensionError
from kunet.tensor import (Tensor, concat, elementwise, getitem, grad_check, matmul, mean, mul, no_grad,
                          relative_error, reshape, sigmoid, softmax, tanh, transpose, tsum)


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(a, Tensor(np.eye(2))).data, a.data)

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_grad_of_sum_with_identity(self):
        a = leaf([[1.0, 2.0], [3.0, 4.0]])
        tsum(matmul(a, Tensor(np.eye(2)))).backward()
        np.testing.assert_array_equal(a.grad, np.ones((2, 2)))
        report = grad_check(lambda t: tsum(matmul(t, Tensor(np.eye(2)))), a)
        assert report.passed

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batch_prefix_broadcast(self, rng):
        a = leaf(rng.normal(size=(4, 2, 3)))
        b = leaf(rng.normal(size=(3, 5)))
        np.testing.assert_allclose(matmul(a, b).data, a.data @ b.data)
        assert grad_check(lambda: tsum(tanh(matmul(a, b))), None, params=[a, b]).passed


class TestElementwise:
    def test_tanh_and_sigmoid_at_zero(self):
        assert tanh(Tensor(0.0)).item() == 0.0
        assert sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_formula(self):
        x = np.linspace(-30, 30, 13)
        np.testing.assert_allclose(sigmoid(Tensor(x)).data, 1.0 / (1.0 + np.exp(-x)), rtol=1e-12)

    def test_tanh_derivative(self):
        x = leaf(0.3)
        tanh(x).backward()
        numeric = (math.tanh(0.3 + 1e-6) - math.tanh(0.3 - 1e-6)) / 2e-6
        assert abs(x.grad - numeric) < 1e-6

    def test_dispatch_by_name(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
        np.testing.assert_array_equal(elementwise("add", a, b).data, [4.0, 7.0])
        np.testing.assert_array_equal(elementwise("sub", a, b).data, [-2.0, -3.0])
        np.testing.assert_array_equal(elementwise("mul", a, b).data, [3.0, 10.0])
        with pytest.raises(ValueError):
            elementwise("relu", a)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
        with pytest.raises(DimensionError):
            Tensor(np.ones((3, 2))) * Tensor(np.ones((3, 1)))

    @pytest.mark.parametrize("seed", range(10))
    def test_every_op_matches_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        a, b = leaf(r.normal(size=(3, 4))), leaf(r.normal(size=(3, 4)))
        w = leaf(r.normal(size=(4, 2)))

        def f():
            h = sigmoid(a * b - a) + tanh(a + b)
            h = softmax(h, axis=0) * h
            h = transpose(reshape(h, (2, 6)), (1, 0))
            h = concat([h, getitem(h, slice(0, 3))], axis=0)
            return mean(h * h) + tsum(matmul(a, w))

        assert grad_check(f, None, params=[a, b, w]).passed


class TestSoftmax:
    def test_examples(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
        np.testing.assert_allclose(softmax(Tensor([7.0, 7.0, 7.0])).data, [1 / 3] * 3)
        np.testing.assert_allclose(softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], rtol=1e-14)

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            softmax(Tensor(np.ones((2, 2))), axis=2)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.integers(1, 3))
    def test_sums_to_one(self, values, rows):
        x = np.tile(np.array(values), (rows, 1))
        s = softmax(Tensor(x), axis=-1).data
        assert np.all(s > 0)
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


class TestRearrangements:
    def test_reshape_round_trip(self):
        x = Tensor(np.arange(1.0, 7.0))
        np.testing.assert_array_equal(reshape(reshape(x, (2, 3)), (6,)).data, np.arange(1.0, 7.0))

    def test_transpose_twice(self, rng):
        x = Tensor(rng.normal(size=(2, 3)))
        np.testing.assert_array_equal(transpose(transpose(x)).data, x.data)

    def test_reshape_count_mismatch(self):
        with pytest.raises(DimensionError):
            reshape(Tensor(np.ones(6)), (4, 2))

    def test_transpose_invalid_permutation(self):
        with pytest.raises(DimensionError):
            transpose(Tensor(np.ones((2, 3))), (0, 0))

    def test_gradient_through_reshape(self, rng):
        x = leaf(rng.normal(size=(2, 3)))
        assert grad_check(lambda t: tsum(mul(reshape(t, (3, 2)), reshape(t, (3, 2)))), x).passed

    def test_storage_is_contiguous(self, rng):
        y = transpose(Tensor(rng.normal(size=(3, 4))), (1, 0))
        assert y.data.flags["C_CONTIGUOUS"]


class TestBackward:
    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            (leaf([1.0, 2.0]) * 2.0).backward()

    def test_loss_without_grad(self):
        with pytest.raises(ContractError):
            tsum(Tensor([1.0, 2.0])).backward()

    def test_leaf_reuse_accumulates(self, rng):
        data = rng.normal(size=(3,))
        x = leaf(data)
        tsum(tanh(x) * x + x * x + tanh(x)).backward()
        reused = x.grad.copy()
        total = np.zeros(3)
        for f in (lambda t: tanh(t) * t, lambda t: t * t, tanh):
            y = leaf(data)
            tsum(f(y)).backward()
            total += y.grad
        # each term alone is only a partial derivative when the leaf appears twice in it,
        # so compare against the analytic total instead
        analytic = (1 - np.tanh(data) ** 2) * data + np.tanh(data) + 2 * data + (1 - np.tanh(data) ** 2)
        np.testing.assert_allclose(reused, analytic, rtol=1e-12)
        np.testing.assert_allclose(total, analytic, rtol=1e-12)

    def test_grads_accumulate_until_zeroed(self):
        x = leaf([1.0, 2.0])
        tsum(x * 3.0).backward()
        tsum(x * 3.0).backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])
        x.zero_grad()
        assert x.grad is None

    def test_diamond_visits_each_node_once(self):
        x = leaf(2.0)
        y = x * x
        z = y + y
        z.backward()
        assert x.grad == 8.0

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_grad_shape_matches_data(self, rng):
        x = leaf(rng.normal(size=(2, 3, 4)))
        tsum(x * x).backward()
        assert x.grad.shape == x.shape

    def test_deep_chain_does_not_recurse(self):
        x = leaf(1.0)
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.backward()
        assert x.grad == 1.0


class TestGradCheck:
    def test_sum_of_squares(self):
        x = leaf([1.0, 2.0, 3.0])
        report = grad_check(lambda t: tsum(t * t), x)
        assert report.max_rel_error < 1e-8
        tsum(x * x).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_detects_wrong_gradient(self):
        from kunet.tensor import _result

        def bad_square(t):
            return _result(t.data ** 2, (t,), lambda g: (g * t.data,), "bad")

        report = grad_check(lambda t: tsum(bad_square(t)), leaf([1.0, 2.0]))
        assert not report.passed
        assert report.worst_tensor == 0
        assert "FAIL" in str(report)

    def test_requires_float64(self):
        with pytest.raises(ContractError):
            grad_check(lambda t: tsum(t), Tensor(np.ones(2, dtype=np.float32), requires_grad=True))

    def test_restores_flags(self):
        x = Tensor([1.0, 2.0])
        grad_check(lambda t: tsum(t * t), x)
        assert not x.requires_grad

    def test_relative_error_floor(self):
        assert relative_error(np.array([0.0]), np.array([1e-9]))[0] == pytest.approx(1e-4)


def test_float32_storage_kept():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert x.dtype == np.float32
    assert Tensor([1, 2]).dtype == np.float64


def test_size_matches_shape(rng):
    x = Tensor(rng.normal(size=(2, 5)))
    assert x.size == math.prod(x.shape) == x.data.size
