import numpy as np
import pytest

from gramreg.errors import DimensionError, DomainError
from gramreg.tensor import elementwise, matmul, reduce, tensor


def test_matmul_identity():
    a = tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(matmul(np.eye(2), a), a)


def test_matmul_dot_product():
    assert matmul(tensor([[1, 2]]), tensor([[3], [4]])).tolist() == [[11.0]]


def test_matmul_zero_annihilates(rng):
    out = matmul(np.zeros((2, 3)), rng.standard_normal((3, 2)))
    np.testing.assert_array_equal(out, np.zeros((2, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("precision,rtol", [("single", 1e-5), ("double", 1e-12)])
def test_matmul_associative(rng, precision, rtol):
    a, b, c = (tensor(rng.standard_normal((4, 4)), precision) for _ in range(3))
    np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=rtol * 10, atol=rtol)


def test_elementwise_examples():
    np.testing.assert_array_equal(elementwise("max", [[-1, 2], [3, -4]], 0), [[0, 2], [3, 0]])
    assert elementwise("sigmoid", 0.0) == 0.5
    assert elementwise("tanh", 0.0) == 0.0
    np.testing.assert_array_equal(elementwise("relu", [-1.0, 2.0]), [0.0, 2.0])


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        elementwise("add", np.ones(3), np.ones(2))


def test_sigmoid_extremes_are_finite():
    out = elementwise("sigmoid", np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_elementwise_commutes_with_reshape(rng):
    x = rng.standard_normal((3, 4))
    for op in ("relu", "sigmoid", "tanh"):
        np.testing.assert_array_equal(elementwise(op, x).reshape(12), elementwise(op, x.reshape(12)))


def test_reduce_examples():
    assert reduce("sum", [1, 2, 3]) == 6
    assert reduce("mean", [2, 4]) == 3
    vals, arg = reduce("max", [[1, 5], [4, 2]], axis=0)
    assert vals.tolist() == [4, 5] and arg.tolist() == [1, 0]


def test_reduce_errors():
    with pytest.raises(DomainError):
        reduce("sum", np.zeros((2, 0)), axis=1)
    with pytest.raises(DomainError):
        reduce("sum", np.zeros(3), axis=2)


def test_sum_of_permutation_matches_oracle(rng):
    x = rng.standard_normal(1000)
    perm = rng.permutation(x)
    import math

    exact = math.fsum(x)
    assert abs(reduce("sum", perm) - exact) <= 1e-12 * np.abs(x).sum()
