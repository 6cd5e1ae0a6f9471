"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    num = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if den == 0 else float(num / den)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6,
                       indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to ``x`` (perturbed in place).

    With ``indices`` (flat positions) only those entries are evaluated and a
    vector of the same length is returned.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size if indices is None else len(indices))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[j] = (fp - fm) / (2 * eps)
    return out.reshape(x.shape) if indices is None else out


def check_layer(layer, x: np.ndarray, rng: np.random.Generator, eps: float = 1e-6,
                max_coords: int | None = None) -> dict[str, float]:
    """Compare a layer's backward pass with finite differences.

    The scalar objective is ``sum(layer(x) * R)`` for a fixed random ``R``.
    Returns the relative error for the input and every parameter.  With
    ``max_coords`` only that many random coordinates of each array are probed.
    """
    x = x.copy()
    out = layer.forward(x)
    proj = rng.standard_normal(out.shape)
    layer.zero_grad()
    out = layer.forward(x)
    dx = layer.backward(proj.astype(out.dtype))
    analytic = {"input": dx.copy()}
    analytic.update({k: p.grad.copy() for k, p in layer.parameters().items()})

    def objective():
        return float(np.sum(layer.forward(x) * proj))

    errors = {}
    targets = {"input": x}
    targets.update({k: p.data for k, p in layer.parameters().items()})
    for name, arr in targets.items():
        if max_coords is not None and arr.size > max_coords:
            idx = rng.choice(arr.size, size=max_coords, replace=False)
            num = numerical_gradient(objective, arr, eps, idx)
            errors[name] = relative_error(analytic[name].reshape(-1)[idx], num)
        else:
            errors[name] = relative_error(analytic[name], numerical_gradient(objective, arr, eps))
    return errors
