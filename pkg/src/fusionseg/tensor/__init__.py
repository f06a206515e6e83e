from .core import DTYPE, ShapeError, Tensor, as_tensor, backward, grad_enabled, no_grad, zero_grads
from . import ops
from .autodiff import flat_grad, flatten, gradcheck, gradient, hvp, numerical_grad, rel_error, unflatten

__all__ = [
    "DTYPE", "ShapeError", "Tensor", "as_tensor", "backward", "grad_enabled", "no_grad",
    "zero_grads", "ops", "flat_grad", "flatten", "gradcheck", "gradient", "hvp",
    "numerical_grad", "rel_error", "unflatten",
]
