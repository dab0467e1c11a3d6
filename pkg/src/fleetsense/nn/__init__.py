from . import autodiff
from .adam import AdamState, adam_step
from .autodiff import NonFiniteError, ShapeError, Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .mlp import Mlp

__all__ = ["autodiff", "AdamState", "adam_step", "NonFiniteError", "ShapeError", "Tensor",
           "no_grad", "load_checkpoint", "save_checkpoint", "grad_check", "Mlp"]
