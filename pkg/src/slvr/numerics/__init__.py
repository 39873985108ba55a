from . import ops
from .gradcheck import grad_check
from .optim import Adam, AdamState, adam_step
from .rng import Rng
from .serialize import FormatError
from .tensor import DimensionError, NumericError, Tensor, as_tensor, set_debug

__all__ = [
    "Adam", "AdamState", "DimensionError", "FormatError", "NumericError", "Rng", "Tensor",
    "adam_step", "as_tensor", "grad_check", "ops", "set_debug",
]
