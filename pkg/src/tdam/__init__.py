"""Top-down attention module (TDAM) on a small numpy deep-learning stack."""
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
