"""Gram regularization of weight kernels.

A learnable layer holds ``N`` kernels of shape ``(C, S)``: ``C`` input
channels at ``S`` spatial positions (``S = 1`` for dense and LSTM gate
matrices).  The weight vectors of all kernels at one spatial position form a
*spatial weight group*.  Each group's Gram matrix is clipped at zero and the
clipped matrices are summed over positions into the kernel Gram matrix ``K``.
The regularizer is::

    L_gram = lambda1 * sum_layers sum_{x != y} K[x, y] + lambda2 * sum_layers trace(K)

``trace(K)`` is the plain sum of squared weights, so ``lambda1 = 0`` recovers
ordinary L2 regularization.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import _kernels
from .errors import DimensionError, DomainError

LAYOUTS = ("fully_connected", "conv2d", "lstm_gate")


@dataclass
class LayerWeights:
    """Kernels of one learnable layer in ``(N, C, S)`` layout plus an optional bias."""

    kernels: np.ndarray
    bias: Optional[np.ndarray] = None
    layout: str = "fully_connected"
    name: str = ""

    def __post_init__(self):
        k = self.kernels
        if k.ndim != 3 or min(k.shape) < 1:
            raise DimensionError(f"kernels must be (N, C, S) with positive extents, got {k.shape}")
        if self.layout not in LAYOUTS:
            raise DomainError(f"unknown layout {self.layout!r}")
        if self.layout != "conv2d" and k.shape[2] != 1:
            raise DimensionError(f"{self.layout} layers have S = 1, got S = {k.shape[2]}")
        if self.bias is not None and self.bias.shape != (k.shape[0],):
            raise DimensionError(f"bias shape {self.bias.shape} does not match N = {k.shape[0]}")

    @property
    def shape(self):
        return self.kernels.shape

    @classmethod
    def from_matrix(cls, w, bias=None, layout="fully_connected", name=""):
        """Wrap an ``(N, C)`` dense or gate matrix."""
        return cls(w.reshape(w.shape[0], w.shape[1], 1), bias, layout, name)

    @classmethod
    def from_conv(cls, w, bias=None, name=""):
        """Wrap an ``(N, C, kh, kw)`` convolution filter bank."""
        n, c, kh, kw = w.shape
        return cls(w.reshape(n, c, kh * kw), bias, "conv2d", name)


@dataclass
class SpatialWeightGroup:
    position: int
    vectors: np.ndarray  # (N, C); a view into the parent kernels


@dataclass
class RegConfig:
    lambda1: float = 1e-3
    lambda2: float = 1e-4
    layer_filter: Optional[Callable[[LayerWeights], bool]] = field(default=None, repr=False)

    def __post_init__(self):
        if not (self.lambda1 >= 0 and self.lambda2 >= 0):
            raise DomainError(f"lambda1 and lambda2 must be >= 0, got {self.lambda1}, {self.lambda2}")

    def selects(self, layer):
        return self.layer_filter is None or bool(self.layer_filter(layer))


@dataclass
class LayerTerm:
    name: str
    offdiag: float
    l2: float


@dataclass
class GramLoss:
    total: float
    cross: float  # lambda1 * sum of off-diagonal mass
    l2: float  # lambda2 * sum of squared weights
    layers: List[LayerTerm]

    def csv_rows(self):
        return [(t.name, t.offdiag, t.l2) for t in self.layers]


def regroup_weights(layer):
    """Split a layer into its ``S`` spatial weight groups (views, no copies)."""
    k = layer.kernels
    return [SpatialWeightGroup(s, k[:, :, s]) for s in range(k.shape[2])]


def group_gram(group):
    v = group.vectors if isinstance(group, SpatialWeightGroup) else np.asarray(group)
    if v.ndim != 2 or v.shape[0] == 0:
        raise DimensionError("group must be a non-empty (N, C) array")
    return _kernels.group_grams_numpy(v[:, :, None])[0]


def kernel_gram(layer):
    """Kernel Gram matrix: sum over positions of the zero-clipped group Gram matrices."""
    return _kernels.kernel_gram(layer.kernels)


def offdiag_sum(k):
    """Sum of ``K[x, y]`` over ordered pairs ``x != y``."""
    k = np.asarray(k)
    return float(k[~np.eye(k.shape[0], dtype=bool)].sum())


def l2_sum(layer):
    return float(np.sum(layer.kernels * layer.kernels))


def gram_loss(layers, cfg):
    """Regularizer value over all layers selected by ``cfg``, with a per-layer breakdown."""
    terms = []
    for layer in layers:
        if not cfg.selects(layer):
            continue
        k = kernel_gram(layer)
        terms.append(LayerTerm(layer.name, offdiag_sum(k), float(np.trace(k))))
    cross = cfg.lambda1 * sum(t.offdiag for t in terms)
    l2 = cfg.lambda2 * sum(t.l2 for t in terms)
    return GramLoss(cross + l2, cross, l2, terms)


def gram_grad(layer, cfg):
    """Gradient of the layer's regularizer term with respect to its kernels.

    For kernel ``i`` at position ``s``::

        2 * lambda1 * sum_{j != i, <w(i,s), w(j,s)> > 0} w(j,s) + 2 * lambda2 * w(i,s)

    The factor 2 on the cross term comes from summing ordered pairs of a
    symmetric matrix.  A zero inner product contributes nothing.
    """
    w = layer.kernels
    grad = 2 * cfg.lambda2 * w
    if cfg.lambda1:
        grad = grad + cfg.lambda1 * _kernels.gram_cross_grad(w)
    return grad.astype(w.dtype, copy=False)
