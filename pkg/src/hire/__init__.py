"""Dynamic extraction and fusion of a transformer encoder's hidden-layer representations."""

from hire.autodiff import Tensor, ShapeError, no_grad, backward, grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "ShapeError", "no_grad", "backward", "grad_check", "__version__"]
