"""Dense tensors with reverse-mode autograd."""

from src.tensor.tensor import Function, Tensor, concat, is_grad_enabled, no_grad

__all__ = ["Function", "Tensor", "concat", "is_grad_enabled", "no_grad"]
