"""Minimal numpy network toolkit with analytic backward passes."""

from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (BatchNorm1d, Conv1d, Layer, Linear, MaxPool1d, Parameter, ReLU, Sequential,
                     Upsample)
from .losses import mse_loss, mse_loss_backward
from .optim import Adam, LrSchedule, lr_at

__all__ = [
    "Adam", "BatchNorm1d", "Conv1d", "Layer", "Linear", "LrSchedule", "MaxPool1d", "Parameter",
    "ReLU", "Sequential", "Upsample", "load_checkpoint", "lr_at", "mse_loss", "mse_loss_backward",
    "save_checkpoint",
]
