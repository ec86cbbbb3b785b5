"""Dense numpy tensors with reverse-mode autodiff and the layers built on them."""

from .autograd import (
    ComputeGraph,
    Tensor,
    as_tensor,
    backward,
    concat,
    grad_enabled,
    no_grad,
)
from .nn import (
    Conv1d,
    Conv3d,
    ConvTranspose1d,
    ConvTranspose3d,
    Dense,
    Dropout,
    Module,
    Parameter,
    PReLU,
    Sequential,
)
from .ops import (
    bce_loss,
    conv1d,
    conv1d_transposed,
    conv3d,
    conv3d_transposed,
    dense,
    dropout,
    gaussian_kl,
    mse_loss,
    prelu,
    sigmoid,
    softmax,
    tanh,
)
from .optim import Adam, TrainConfig

__all__ = [
    "Adam",
    "ComputeGraph",
    "Conv1d",
    "Conv3d",
    "ConvTranspose1d",
    "ConvTranspose3d",
    "Dense",
    "Dropout",
    "Module",
    "PReLU",
    "Parameter",
    "Sequential",
    "Tensor",
    "TrainConfig",
    "as_tensor",
    "backward",
    "bce_loss",
    "concat",
    "conv1d",
    "conv1d_transposed",
    "conv3d",
    "conv3d_transposed",
    "dense",
    "dropout",
    "gaussian_kl",
    "grad_enabled",
    "mse_loss",
    "no_grad",
    "prelu",
    "sigmoid",
    "softmax",
    "tanh",
]
