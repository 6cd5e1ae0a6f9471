"""Conditional masked autoregressive flow.

Density direction (one pass per transform)::

    v = u[:, perm]                      # reverse order between transforms
    mu, alpha = MADE(v, context)        # alpha clipped to [-7, 7]
    u' = (v - mu) * exp(-alpha)         # log|det| = -sum(alpha)

Sampling inverts each transform one dimension at a time,
``v_i = mu_i + exp(alpha_i) * u'_i``.  Parameters are standardized with
frozen statistics before entering the first transform; contexts likewise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError, ShapeError
from .nn import Linear, ReLU, load_checkpoint, save_checkpoint
from .nn.layers import Parameter

ALPHA_CLIP = 7.0
LOG_2PI = math.log(2 * math.pi)


def made_degrees(dim: int, context_dim: int, hidden: int, n_hidden: int):
    """Connectivity degrees: parameters 1..dim, context 0, hidden units cycle 0..dim-1."""
    inputs = np.concatenate([np.arange(1, dim + 1), np.zeros(context_dim, dtype=int)])
    hidden_deg = [np.arange(hidden) % dim for _ in range(n_hidden)]
    outputs = np.concatenate([np.arange(1, dim + 1), np.arange(1, dim + 1)])
    return inputs, hidden_deg, outputs


class MADE:
    """Masked dense network producing per-dimension shift and log-scale.

    Output ``i`` (1-based) only sees parameter inputs with index < i; the
    context reaches every hidden unit.
    """

    def __init__(self, dim: int, context_dim: int, hidden: int = 50, n_hidden: int = 2,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.context_dim = context_dim
        d_in, d_hidden, d_out = made_degrees(dim, context_dim, hidden, n_hidden)
        self.layers = []
        prev = d_in
        for deg in d_hidden:
            mask = (deg[:, None] >= prev[None, :]).astype(float)
            self.layers += [Linear(len(prev), len(deg), rng, mask, dtype=dtype), ReLU()]
            prev = deg
        mask = (d_out[:, None] > prev[None, :]).astype(float)
        # zero-initialized output: the untrained transform is the identity
        self.layers.append(Linear(len(prev), 2 * dim, rng, mask, zero_init=True, dtype=dtype))

    def linear_layers(self) -> list[Linear]:
        return [l for l in self.layers if isinstance(l, Linear)]

    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for i, lin in enumerate(self.linear_layers()):
            out[f"{i}.weight"] = lin.weight
            out[f"{i}.bias"] = lin.bias
        return out

    def forward(self, v: np.ndarray, context: np.ndarray):
        h = np.concatenate([v, context], axis=1)
        for layer in self.layers:
            h = layer.forward(h)
        return h[:, :self.dim], h[:, self.dim:]

    def backward(self, dmu: np.ndarray, dalpha: np.ndarray):
        g = np.concatenate([dmu, dalpha], axis=1)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g[:, :self.dim], g[:, self.dim:]


@dataclass
class _Cache:
    v: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    unclipped: list = field(default_factory=list)
    u_out: list = field(default_factory=list)


class MAF:
    """Stack of MADE affine transforms with reverse permutations in between."""

    def __init__(self, dim: int = 4, context_dim: int = 32, n_transforms: int = 5,
                 hidden: int = 50, n_hidden: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.context_dim = context_dim
        self.mades = [MADE(dim, context_dim, hidden, n_hidden, rng) for _ in range(n_transforms)]
        ident = np.arange(dim)
        self.perms = [ident if k == 0 else ident[::-1].copy() for k in range(n_transforms)]
        self.theta_mean = np.zeros(dim)
        self.theta_std = np.ones(dim)
        self.context_mean = np.zeros(context_dim)
        self.context_std = np.ones(context_dim)
        self._cache = None

    # -- plumbing -----------------------------------------------------------
    def parameters(self) -> dict[str, Parameter]:
        return {f"made{k}.{name}": p for k, m in enumerate(self.mades)
                for name, p in m.parameters().items()}

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad[...] = 0

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def set_standardization(self, theta: np.ndarray | None = None, context: np.ndarray | None = None,
                            min_std: float = 1e-6) -> None:
        """Freeze input statistics from a reference sample (e.g. the first round)."""
        if theta is not None:
            self.theta_mean = np.asarray(theta, dtype=np.float64).mean(axis=0)
            self.theta_std = np.maximum(np.asarray(theta, dtype=np.float64).std(axis=0), min_std)
        if context is not None:
            self.context_mean = np.asarray(context, dtype=np.float64).mean(axis=0)
            self.context_std = np.maximum(np.asarray(context, dtype=np.float64).std(axis=0), min_std)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.parameters().items()}
        for k, m in enumerate(self.mades):
            for i, lin in enumerate(m.linear_layers()):
                state[f"made{k}.{i}.mask"] = lin.mask.copy()
        for k, perm in enumerate(self.perms):
            state[f"perm{k}"] = perm.astype(np.int64)
        state["theta_mean"] = self.theta_mean.copy()
        state["theta_std"] = self.theta_std.copy()
        state["context_mean"] = self.context_mean.copy()
        state["context_std"] = self.context_std.copy()
        state["shape"] = np.array([self.dim, self.context_dim, len(self.mades),
                                   self.mades[0].linear_layers()[0].out_features,
                                   len(self.mades[0].linear_layers()) - 1], dtype=np.int64)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for k, p in params.items():
            if state[k].shape != p.data.shape:
                raise ShapeError(f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data = state[k].astype(np.float64).copy()
            p.grad = np.zeros_like(p.data)
        for k, m in enumerate(self.mades):
            for i, lin in enumerate(m.linear_layers()):
                lin.mask = state[f"made{k}.{i}.mask"].astype(np.float64).copy()
        self.perms = [state[f"perm{k}"].astype(np.int64).copy() for k in range(len(self.mades))]
        self.theta_mean = state["theta_mean"].copy()
        self.theta_std = state["theta_std"].copy()
        self.context_mean = state["context_mean"].copy()
        self.context_std = state["context_std"].copy()

    def save(self, path: str | Path, extra: dict[str, np.ndarray] | None = None) -> None:
        state = self.state_dict()
        state.update(extra or {})
        save_checkpoint(path, state)

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "MAF":
        dim, ctx, n_tr, hidden, n_hidden = (int(v) for v in state["shape"])
        maf = cls(dim, ctx, n_tr, hidden, n_hidden)
        maf.load_state_dict(state)
        return maf

    @classmethod
    def load(cls, path: str | Path) -> "MAF":
        state, _ = load_checkpoint(path)
        return cls.from_state(state)

    # -- density ---------------------------------------------------------------
    def _prepare(self, theta, context):
        theta = np.asarray(theta, dtype=np.float64)
        context = np.asarray(context, dtype=np.float64)
        if theta.ndim == 1:
            theta = theta[None]
        if context.ndim == 1:
            context = np.broadcast_to(context, (len(theta), self.context_dim))
        if theta.shape[1] != self.dim or context.shape != (len(theta), self.context_dim):
            raise ShapeError(f"theta {theta.shape} / context {context.shape} do not match the flow")
        return theta, context

    def forward(self, theta: np.ndarray, context: np.ndarray, cache: bool = False):
        """Map parameters to base-space draws; returns ``(z, log|det J|)``."""
        theta, context = self._prepare(theta, context)
        u = (theta - self.theta_mean) / self.theta_std
        ctx = (context - self.context_mean) / self.context_std
        logdet = np.full(len(u), -np.sum(np.log(self.theta_std)))
        c = _Cache() if cache else None
        for k, (made, perm) in enumerate(zip(self.mades, self.perms)):
            v = u[:, perm]
            mu, alpha_raw = made.forward(v, ctx)
            alpha = np.clip(alpha_raw, -ALPHA_CLIP, ALPHA_CLIP)
            u = (v - mu) * np.exp(-alpha)
            logdet = logdet - alpha.sum(axis=1)
            if not np.all(np.isfinite(u)):
                raise NumericError(f"non-finite values in flow transform {k}")
            if cache:
                c.v.append(v)
                c.alpha.append(alpha)
                c.unclipped.append(np.abs(alpha_raw) < ALPHA_CLIP)
                c.u_out.append(u)
        if cache:
            self._cache = c
        return u, logdet

    def log_prob(self, theta: np.ndarray, context: np.ndarray, cache: bool = False) -> np.ndarray:
        z, logdet = self.forward(theta, context, cache)
        return -0.5 * np.sum(z * z, axis=1) - 0.5 * self.dim * LOG_2PI + logdet

    def backward(self, grad_logp: np.ndarray):
        """Back-propagate ``dL/dlog_prob`` from the last cached ``log_prob`` call.

        Parameter gradients are accumulated; returns ``(dL/dtheta, dL/dcontext)``.
        """
        c = self._cache
        if c is None:
            raise RuntimeError("log_prob(..., cache=True) must precede backward")
        g = np.asarray(grad_logp, dtype=np.float64)[:, None]
        du = -g * c.u_out[-1]
        dctx = np.zeros((len(g), self.context_dim))
        for k in reversed(range(len(self.mades))):
            u_out, alpha = c.u_out[k], c.alpha[k]
            scale = np.exp(-alpha)
            dv = du * scale
            dmu = -dv
            dalpha = (-du * u_out - g) * c.unclipped[k]
            dv_made, dctx_k = self.mades[k].backward(dmu, dalpha)
            dv += dv_made
            dctx += dctx_k
            du = np.empty_like(dv)
            du[:, self.perms[k]] = dv
        self._cache = None
        return du / self.theta_std, dctx / self.context_std

    def inverse(self, z: np.ndarray, context: np.ndarray) -> np.ndarray:
        """Map base-space draws back to parameters (sequential per dimension)."""
        z, context = self._prepare(z, context)
        ctx = (context - self.context_mean) / self.context_std
        u = z.copy()
        for made, perm in zip(reversed(self.mades), reversed(self.perms)):
            v = np.zeros_like(u)
            for i in range(self.dim):
                mu, alpha = made.forward(v, ctx)
                alpha = np.clip(alpha, -ALPHA_CLIP, ALPHA_CLIP)
                v[:, i] = mu[:, i] + np.exp(alpha[:, i]) * u[:, i]
            u = np.empty_like(v)
            u[:, perm] = v
        return u * self.theta_std + self.theta_mean

    def sample(self, n: int, context: np.ndarray, seed) -> np.ndarray:
        """``n`` draws for one context vector; deterministic given ``seed``."""
        if n < 1:
            raise ValueError("n must be at least 1")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        z = rng.standard_normal((n, self.dim))
        return self.inverse(z, np.broadcast_to(np.asarray(context, dtype=np.float64),
                                               (n, self.context_dim)))


def log_prob(maf: MAF, theta: np.ndarray, context: np.ndarray) -> np.ndarray:
    return maf.log_prob(theta, context)


def sample(maf: MAF, n: int, context: np.ndarray, seed) -> np.ndarray:
    return maf.sample(n, context, seed)


@dataclass
class AutoregressiveReport:
    violations: list[tuple[int, int, int]]
    checked: int

    @property
    def ok(self) -> bool:
        return not self.violations


def check_autoregressive(maf: MAF, n_points: int = 8, seed: int = 0) -> AutoregressiveReport:
    """Probe every transform: outputs ``i`` must not move when input ``j >= i`` moves.

    Indices are positions in the transform's own ordering (0-based).  A
    violation is recorded as ``(transform, i, j)`` whenever the shift or
    log-scale of output ``i`` changes at all.
    """
    rng = np.random.default_rng(seed)
    violations = set()
    checked = 0
    ctx = rng.standard_normal((n_points, maf.context_dim))
    for k, made in enumerate(maf.mades):
        v = rng.standard_normal((n_points, maf.dim))
        mu0, a0 = made.forward(v, ctx)
        for j in range(maf.dim):
            for delta in (1.0, -3.5):
                vp = v.copy()
                vp[:, j] += delta
                mu1, a1 = made.forward(vp, ctx)
                for i in range(j + 1):
                    checked += 1
                    if np.any(mu1[:, i] != mu0[:, i]) or np.any(a1[:, i] != a0[:, i]):
                        violations.add((k, i, j))
    return AutoregressiveReport(sorted(violations), checked)
