from . import layers, tensor
from .checkpoint import ParameterSet, config_digest, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .optim import RmspropState, collect_grads, rmsprop_step, zero_grads
from .tensor import Tensor, constant, no_grad, parameter

__all__ = [
    "layers", "tensor", "Tensor", "constant", "no_grad", "parameter",
    "ParameterSet", "config_digest", "load_checkpoint", "save_checkpoint",
    "grad_check", "RmspropState", "collect_grads", "rmsprop_step", "zero_grads",
]
