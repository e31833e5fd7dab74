from autodiff.base import Module, Parameter
from autodiff.tensor import Tensor

__all__ = ["Module", "Parameter", "Tensor"]
