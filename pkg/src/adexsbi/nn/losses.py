import numpy as np

from ..errors import ShapeError


def _check(prediction: np.ndarray, target: np.ndarray) -> None:
    if prediction.shape != target.shape:
        raise ShapeError(f"shape mismatch: {prediction.shape} vs {target.shape}")


def mse_loss(prediction: np.ndarray, target: np.ndarray) -> float:
    """Mean over all elements of the squared difference."""
    _check(prediction, target)
    diff = prediction - target
    return float(np.mean(diff * diff, dtype=np.float64))


def mse_loss_backward(prediction: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of :func:`mse_loss` with respect to ``prediction``."""
    _check(prediction, target)
    return (2.0 / prediction.size) * (prediction - target)
