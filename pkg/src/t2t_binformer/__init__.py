"""Tokens-to-token transformer for document image binarization."""

from .model import ModelConfig, ModelParams, forward, predict_image, preset
from .tensor import Tensor, grad_check, no_grad

__all__ = ["ModelConfig", "ModelParams", "Tensor", "forward", "grad_check", "no_grad",
           "predict_image", "preset"]
__version__ = "0.1.0"
