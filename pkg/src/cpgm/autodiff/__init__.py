"""Minimal reverse-mode differentiation over float64 numpy arrays."""

from cpgm.autodiff.functional import (
    batch_norm,
    conv2d,
    conv_transpose2d,
    flatten,
    linear,
    log_softmax,
    one_hot,
    prelu,
    reparameterize,
    sigmoid,
    softmax,
    softplus,
    unflatten,
)
from cpgm.autodiff.gradcheck import GradcheckReport, finite_difference_check, kink_margin
from cpgm.autodiff.layers import (
    BatchNorm,
    Conv2d,
    ConvBlock,
    ConvTranspose2d,
    Linear,
    ParameterSet,
    PReLU,
)
from cpgm.autodiff.optim import SGD, OptimizerState, sgd_step
from cpgm.autodiff.tensor import Tensor, backward, concat

__all__ = [
    "BatchNorm",
    "Conv2d",
    "ConvBlock",
    "ConvTranspose2d",
    "GradcheckReport",
    "Linear",
    "OptimizerState",
    "PReLU",
    "ParameterSet",
    "SGD",
    "Tensor",
    "backward",
    "batch_norm",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "finite_difference_check",
    "kink_margin",
    "flatten",
    "linear",
    "log_softmax",
    "one_hot",
    "prelu",
    "reparameterize",
    "sgd_step",
    "sigmoid",
    "softmax",
    "softplus",
    "unflatten",
]
