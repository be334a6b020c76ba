"""Gram regularization of weight kernels in a small NumPy network engine."""

from ._kernels import BACKEND
from .gram import (
    GramLoss,
    LayerWeights,
    RegConfig,
    SpatialWeightGroup,
    gram_grad,
    gram_loss,
    group_gram,
    kernel_gram,
    l2_sum,
    offdiag_sum,
    regroup_weights,
)

__version__ = "0.1.0"
