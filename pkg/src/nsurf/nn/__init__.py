from . import autograd
from .autograd import Tensor, no_grad
from .bundle import NetworkBundle, load_checkpoint, save_checkpoint
from .gradcheck import grad_check, relative_error
from .optim import Adam, adam_step

__all__ = ["autograd", "Tensor", "no_grad", "NetworkBundle", "load_checkpoint", "save_checkpoint",
           "grad_check", "relative_error", "Adam", "adam_step"]
