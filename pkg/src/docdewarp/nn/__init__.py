"""Minimal numpy autodiff core: tensors, image kernels, layers, optimizers."""

from docdewarp.nn import functional
from docdewarp.nn.checkpoint import load_params, save_params
from docdewarp.nn.gradcheck import GradCheckReport, grad_check
from docdewarp.nn.module import Conv2d, Module
from docdewarp.nn.optim import SGD, Adam
from docdewarp.nn.tensor import Tensor, no_grad, zero_grads

__all__ = [
    "Adam", "Conv2d", "GradCheckReport", "Module", "SGD", "Tensor", "functional",
    "grad_check", "load_params", "no_grad", "save_params", "zero_grads",
]
