"""Layers with hand-written forward and backward passes.

The 1-D layers work channels-last, ``(batch, length, channels)``, so that
convolutions reduce to a single matrix product without transposes; dense
layers take ``(batch, features)``.  ``backward`` consumes the gradient
of the loss with respect to the layer output, accumulates parameter
gradients into ``Parameter.grad`` and returns the gradient with respect to
the layer input.  Only the most recent forward call is remembered.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError

DEFAULT_DTYPE = np.float32


class Parameter:
    """A trainable array with its gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype})"


class Layer:
    training = True

    def parameters(self) -> dict[str, Parameter]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def train(self, mode: bool = True) -> "Layer":
        self.training = mode
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad[...] = 0

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def astype(self, dtype) -> "Layer":
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for name, buf in self.buffers().items():
            if np.issubdtype(buf.dtype, np.floating):
                setattr(self, name, buf.astype(dtype))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.parameters().items()}
        state.update({name: np.array(b, copy=True) for name, b in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        bufs = self.buffers()
        missing = (set(params) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"missing state entries: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ShapeError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], copy=True)
            p.grad = np.zeros_like(p.data)
        for name in bufs:
            self._set_buffer(name, np.array(state[name], copy=True))

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def __iter__(self) -> Iterator[Layer]:
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters().items():
                out[f"{i}.{name}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers().items():
                out[f"{i}.{name}"] = b
        return out

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        idx, rest = name.split(".", 1)
        self.layers[int(idx)]._set_buffer(rest, value)

    def train(self, mode: bool = True) -> "Sequential":
        self.training = mode
        for layer in self.layers:
            layer.train(mode)
        return self

    def astype(self, dtype) -> "Sequential":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class Conv1d(Layer):
    """Stride-1 cross-correlation with zero "same" padding (odd kernels).

    Weights are stored ``(out_channels, in_channels, kernel)``.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        if kernel_size % 2 != 1:
            raise ShapeError("kernel size must be odd for same padding")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.needs_input_grad = True
        bound = np.sqrt(6.0 / (in_channels * kernel_size))  # He-uniform
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size))
        self.weight = Parameter(w.astype(dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))
        self._cols = None

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ShapeError(f"Conv1d expects (N, L, {self.in_channels}), got {x.shape}")
        n, length, _ = x.shape
        cols = _im2col(x, self.kernel_size)
        y = cols @ self.weight.data.reshape(self.out_channels, -1).T
        y += self.bias.data
        self._cols = cols
        self._in_shape = x.shape
        return y.reshape(n, length, self.out_channels)

    def backward(self, grad):
        n, length, c = self._in_shape
        k = self.kernel_size
        g2 = grad.reshape(n * length, self.out_channels)
        self.weight.grad += (g2.T @ self._cols).reshape(self.weight.data.shape)
        self.bias.grad += g2.sum(axis=0)
        if not self.needs_input_grad:
            return None
        # tap-major weight layout keeps each tap's channel block contiguous
        w_taps = self.weight.data.transpose(0, 2, 1).reshape(self.out_channels, -1)
        dcols = (g2 @ w_taps).reshape(n, length, k, c)
        p = k // 2
        dxp = np.zeros((n, length + 2 * p, c), dtype=dcols.dtype)
        for j in range(k):
            dxp[:, j:j + length] += dcols[:, :, j]
        return dxp[:, p:p + length, :]


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Rows ``(N * L, C * k)`` holding each output position's receptive field."""
    n, length, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (0, 0)))
    return sliding_window_view(xp, k, axis=1).reshape(n * length, c * k)


class BatchNorm1d(Layer):
    """Per-channel batch normalization over the batch and length axes."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.channels:
            raise ShapeError(f"BatchNorm1d expects (N, L, {self.channels}), got {x.shape}")
        x2 = x.reshape(-1, self.channels)
        count = x2.shape[0]
        if self.training:
            if x.shape[0] < 2:
                raise ShapeError("BatchNorm1d in training mode needs a batch of at least 2")
            mean = _colsum(x2) / count
            xc = x2 - mean
            var = _colsum(xc * xc) / count
            m = self.momentum
            dt = self.running_mean.dtype
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(dt)
            self.running_var = ((1 - m) * self.running_var + m * var * count / (count - 1)).astype(dt)
        else:
            xc = x2 - self.running_mean
            var = self.running_var
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = xc * inv_std
        self._xhat = xhat
        self._inv_std = inv_std
        self._train_pass = self.training
        return (xhat * self.weight.data + self.bias.data).reshape(x.shape)

    def backward(self, grad):
        g2 = grad.reshape(-1, self.channels)
        xhat = self._xhat
        self.weight.grad += _colsum(g2 * xhat)
        self.bias.grad += _colsum(g2)
        dxhat = g2 * self.weight.data
        if not self._train_pass:
            return (dxhat * self._inv_std).reshape(grad.shape)
        count = g2.shape[0]
        s1 = _colsum(dxhat) / count
        s2 = _colsum(dxhat * xhat) / count
        return (self._inv_std * (dxhat - s1 - xhat * s2)).reshape(grad.shape)


def _colsum(a: np.ndarray) -> np.ndarray:
    """Column sums of a 2-D array as a matrix-vector product."""
    return np.ones(a.shape[0], dtype=a.dtype) @ a


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class MaxPool1d(Layer):
    """Non-overlapping max pooling with window 2 along the length axis;
    ties go to the earlier sample."""

    def forward(self, x):
        if x.shape[1] % 2:
            raise ShapeError("MaxPool1d needs an even length")
        left, right = x[:, 0::2], x[:, 1::2]
        self._take_left = left >= right
        return np.where(self._take_left, left, right)

    def backward(self, grad):
        out = np.empty((grad.shape[0], 2 * grad.shape[1]) + grad.shape[2:], dtype=grad.dtype)
        out[:, 0::2] = grad * self._take_left
        out[:, 1::2] = grad * ~self._take_left
        return out


class Upsample(Layer):
    """Nearest-neighbour upsampling by a factor of two along the length axis."""

    def forward(self, x):
        return np.repeat(x, 2, axis=1)

    def backward(self, grad):
        return grad[:, 0::2] + grad[:, 1::2]


class Linear(Layer):
    """Dense layer ``y = x @ (W * mask).T + b``; ``mask`` defaults to all ones."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 mask: np.ndarray | None = None, zero_init: bool = False, dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            w = np.zeros((out_features, in_features))
        else:
            bound = 1.0 / np.sqrt(in_features)
            w = rng.uniform(-bound, bound, size=(out_features, in_features))
        self.weight = Parameter(w.astype(dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))
        if mask is None:
            mask = np.ones((out_features, in_features))
        if mask.shape != (out_features, in_features):
            raise ShapeError(f"mask shape {mask.shape} != {(out_features, in_features)}")
        self.mask = mask.astype(dtype)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {"mask": self.mask}

    def effective_weight(self) -> np.ndarray:
        return self.weight.data * self.mask

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Linear expects (N, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.effective_weight().T + self.bias.data

    def backward(self, grad):
        self.weight.grad += (grad.T @ self._x) * self.mask
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.effective_weight()
