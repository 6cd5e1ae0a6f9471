from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .layers import Parameter


class Adam:
    """Adam with bias correction.  ``step`` uses the gradients stored on the parameters."""

    def __init__(self, params: dict[str, Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"t": np.array([self.t], dtype=np.int64)}
        for k in self.params:
            state[f"m.{k}"] = self.m[k].copy()
            state[f"v.{k}"] = self.v[k].copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"], copy=True)
            self.v[k] = np.array(state[f"v.{k}"], copy=True)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup over batches, then per-epoch exponential decay.

    Epochs are counted from 1; the first decayed epoch is
    ``decay_start_epoch + 1``.
    """

    base_lr: float = 1e-4
    warmup_start: float = 1e-8
    warmup_batches: int = 2000
    decay_start_epoch: int = 70
    decay_factor: float = 0.94

    def __post_init__(self):
        if not self.warmup_start <= self.base_lr:
            raise ConfigError("warmup_start must not exceed base_lr")
        if not 0 < self.decay_factor < 1:
            raise ConfigError("decay_factor must lie in (0, 1)")
        if self.warmup_batches < 0 or self.decay_start_epoch < 0:
            raise ConfigError("schedule counts must be non-negative")

    def lr_at(self, global_batch: int, epoch: int) -> float:
        if global_batch < self.warmup_batches:
            frac = global_batch / self.warmup_batches
            return self.warmup_start + frac * (self.base_lr - self.warmup_start)
        return self.base_lr * self.decay_factor ** max(0, epoch - self.decay_start_epoch)

    @classmethod
    def compressed(cls, epochs: int, batches_per_epoch: int, reference_epochs: int = 150,
                   reference_batches_per_epoch: int = 5000, **kw) -> "LrSchedule":
        """The reference schedule squeezed into a shorter run.

        Warmup keeps its fraction of an epoch, the decay onset keeps its
        fraction of the run and the per-epoch factor is raised so the total
        decay over the run is unchanged.  The reference corresponds to
        160000 training traces in batches of 32 for 150 epochs.
        """
        ref = cls(**kw)
        warmup = max(1, round(ref.warmup_batches * batches_per_epoch / reference_batches_per_epoch))
        scale = reference_epochs / epochs
        return cls(
            base_lr=ref.base_lr,
            warmup_start=ref.warmup_start,
            warmup_batches=warmup,
            decay_start_epoch=int(round(ref.decay_start_epoch / scale)),
            decay_factor=ref.decay_factor ** scale,
        )


def lr_at(schedule: LrSchedule, global_batch: int, epoch: int) -> float:
    return schedule.lr_at(global_batch, epoch)
