"""Array autodiff core and the primitive layers the acoustic model is built from."""

from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .functional import (
    activation,
    batch_norm,
    conv1d_depthwise,
    conv2d,
    dropout,
    glu,
    layer_norm,
    linear,
    log_softmax,
    relu,
    sigmoid,
    softmax,
    swish,
)
from .gradcheck import gradcheck
from .module import Module, Parameter, ParamGroup
from .tensor import Tensor, is_grad_enabled, no_grad, tensor

__all__ = [
    "Module",
    "ParamGroup",
    "Parameter",
    "Tensor",
    "activation",
    "batch_norm",
    "conv1d_depthwise",
    "conv2d",
    "dropout",
    "functional",
    "glu",
    "gradcheck",
    "is_grad_enabled",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "log_softmax",
    "no_grad",
    "relu",
    "save_checkpoint",
    "sigmoid",
    "softmax",
    "swish",
    "tensor",
]
