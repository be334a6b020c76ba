"""Dense tensor helpers.

Tensors are plain row-major ``numpy.ndarray`` objects of dtype float32
("single") or float64 ("double").  The functions here add the shape checks
and error types the rest of the package relies on; broadcasting is limited
to scalar-with-tensor.
"""

import numpy as np

from .errors import DimensionError, DomainError

PRECISIONS = {"single": np.float32, "double": np.float64}


def dtype_of(precision):
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise DomainError(f"unknown precision {precision!r}") from None


def precision_of(dtype):
    dtype = np.dtype(dtype)
    for name, t in PRECISIONS.items():
        if dtype == t:
            return name
    raise DomainError(f"unsupported dtype {dtype}")


def tensor(data, precision="double"):
    """Build a C-contiguous tensor of the requested precision."""
    return np.ascontiguousarray(np.asarray(data, dtype=dtype_of(precision)))


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0)


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}
_UNARY = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": np.tanh,
}


def elementwise(op, a, b=None):
    """Apply ``op`` pointwise.

    Binary ops (add, sub, mul, max) take a tensor or a scalar as ``b``; unary
    ops (relu, sigmoid, tanh) ignore it.
    """
    a = np.asarray(a)
    if op in _UNARY:
        return _UNARY[op](a)
    if op not in _BINARY:
        raise DomainError(f"unknown elementwise op {op!r}")
    if b is None:
        raise DomainError(f"{op} needs a second operand")
    b = np.asarray(b)
    if b.ndim != 0 and b.shape != a.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return _BINARY[op](a, b)


def reduce(op, a, axis=None):
    """Reduce with sum, mean or max.

    For ``max`` returns ``(values, argmax)``; argmax picks the first index on
    ties, which is what view pooling uses to route gradients.
    """
    a = np.asarray(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise DomainError(f"axis {axis} out of range for rank {a.ndim}")
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise DomainError("reduction over an empty axis")
    if op == "sum":
        return a.sum(axis=axis)
    if op == "mean":
        return a.mean(axis=axis)
    if op == "max":
        return a.max(axis=axis), a.argmax(axis=axis)
    raise DomainError(f"unknown reduction {op!r}")
