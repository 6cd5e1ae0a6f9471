"""Multi-round neural posterior estimation with a jointly trained encoder.

Round 1 draws parameters from the uniform prior box and fits the flow by
maximum likelihood.  Later rounds draw from the current posterior at the
target observation and switch to the atomic (contrastive) objective, which
keeps the estimate targeted at the true posterior although the proposal is
no longer the prior.  Gradients reach the encoder through the context
vectors, so encoder and flow are optimized together.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import dataset as ds_io
from .autoencoder import Autoencoder
from .errors import ConfigError, LeakageError, SimulationError, TrainingError
from .flow import MAF
from .neuron import CODE_MAX, DeviceConfig, run_experiment
from .nn import Adam, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

Simulator = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class PriorBox:
    """Uniform prior over the continuous box ``[low, high]^4``."""

    low: tuple[float, ...] = (0.0,) * 4
    high: tuple[float, ...] = (float(CODE_MAX),) * 4

    def __post_init__(self):
        if len(self.low) != len(self.high) or any(h <= l for l, h in zip(self.low, self.high)):
            raise ConfigError("prior box needs low < high in every dimension")

    @property
    def dim(self) -> int:
        return len(self.low)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(n, self.dim))

    def contains(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(theta)
        return np.all((theta >= self.low) & (theta <= self.high), axis=1)

    def log_prob(self, theta: np.ndarray) -> np.ndarray:
        vol = float(np.sum(np.log(np.subtract(self.high, self.low))))
        return np.where(self.contains(theta), -vol, -np.inf)


@dataclass
class RoundConfig:
    rounds: int = 20
    sims_per_round: int = 1000
    n_atoms: int = 10
    batch_size: int = 50
    val_fraction: float = 0.1
    patience: int = 20
    max_epochs: int = 500
    flow_lr: float = 5e-4
    encoder_lr: float = 5e-4
    freeze_encoder: bool = False
    accumulate: bool = True
    max_skip_fraction: float = 0.1
    flow_transforms: int = 5
    flow_hidden: int = 50
    flow_hidden_layers: int = 2

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be at least 1")
        if self.sims_per_round < self.batch_size:
            raise ConfigError("sims_per_round must be at least the batch size")
        if not 1 <= self.n_atoms <= self.batch_size:
            raise ConfigError("n_atoms must lie in [1, batch_size]")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch normalization)")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")


# ---------------------------------------------------------------------------
# losses

def _atom_indices(batch: int, n_atoms: int, rng: np.random.Generator) -> np.ndarray:
    """``(batch, n_atoms)`` indices: column 0 is the row itself, the rest are
    distinct other rows drawn uniformly without replacement."""
    keys = rng.random((batch, batch))
    np.fill_diagonal(keys, np.inf)
    others = np.argsort(keys, axis=1)[:, :n_atoms - 1]
    return np.concatenate([np.arange(batch)[:, None], others], axis=1)


def nll_loss(flow: MAF, theta: np.ndarray, context: np.ndarray, compute_grad: bool = False):
    """Mean negative log density; returns ``(loss, dL/dcontext or None)``."""
    lp = flow.log_prob(theta, context, cache=compute_grad)
    loss = -float(np.mean(lp))
    if not compute_grad:
        return loss, None
    _, dctx = flow.backward(np.full(len(lp), -1.0 / len(lp)))
    return loss, dctx


def atomic_loss(flow: MAF, theta: np.ndarray, context: np.ndarray, n_atoms: int,
                rng: np.random.Generator, log_prior: Callable[[np.ndarray], np.ndarray] | None = None,
                proposal_set: np.ndarray | None = None, first_round: bool = False,
                compute_grad: bool = False):
    """Proposal-corrected loss over atoms.

    For row ``i`` the true parameter competes with ``n_atoms - 1``
    alternatives from ``proposal_set`` (the batch itself by default, with row
    ``i`` excluded); the loss is the mean of
    ``-(s_i0 - logsumexp_j s_ij)`` with ``s = log q(theta | x_i) - log p(theta)``.
    ``first_round`` (or ``n_atoms == 1``) gives the plain negative log density.

    Returns ``(loss, dL/dcontext)``; the context gradient is ``None`` unless
    ``compute_grad`` is set, in which case flow parameter gradients are also
    accumulated.
    """
    if first_round or n_atoms == 1:
        return nll_loss(flow, theta, context, compute_grad)
    theta = np.asarray(theta, dtype=np.float64)
    context = np.asarray(context, dtype=np.float64)
    b = len(theta)
    if n_atoms > b:
        raise ConfigError("n_atoms exceeds the batch size")
    if proposal_set is None:
        atoms = theta[_atom_indices(b, n_atoms, rng)]
    else:
        pool = np.asarray(proposal_set, dtype=np.float64)
        picks = np.stack([rng.choice(len(pool), n_atoms - 1, replace=False) for _ in range(b)])
        atoms = np.concatenate([theta[:, None], pool[picks]], axis=1)
    flat = atoms.reshape(b * n_atoms, -1)
    ctx = np.repeat(context, n_atoms, axis=0)
    lp = flow.log_prob(flat, ctx, cache=compute_grad).reshape(b, n_atoms)
    if log_prior is not None:
        lp = lp - np.asarray(log_prior(flat)).reshape(b, n_atoms)
    m = lp.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(lp - m), axis=1))
    loss = -float(np.mean(lp[:, 0] - lse))
    if not compute_grad:
        return loss, None
    soft = np.exp(lp - lse[:, None])
    onehot = np.zeros_like(soft)
    onehot[:, 0] = 1.0
    g = (-(onehot - soft) / b).reshape(-1)
    _, dctx = flow.backward(g)
    return loss, dctx.reshape(b, n_atoms, -1).sum(axis=1)


# ---------------------------------------------------------------------------
# posterior

@dataclass
class Posterior:
    flow: MAF
    encoder: Autoencoder
    x_star: np.ndarray
    prior: PriorBox = field(default_factory=PriorBox)
    round_index: int = 0

    @property
    def target_embedding(self) -> np.ndarray:
        return self.encoder.eval().encode(self.x_star).astype(np.float64)

    def log_prob(self, theta: np.ndarray) -> np.ndarray:
        """Flow log density at the target; ``-inf`` outside the prior box
        (not renormalized for rejected mass)."""
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        lp = self.flow.log_prob(theta, self.target_embedding)
        return np.where(self.prior.contains(theta), lp, -np.inf)

    def sample(self, n: int, seed, max_proposals: int = 1_000_000,
               min_acceptance: float = 1e-3) -> tuple[np.ndarray, float]:
        """Rejection-sample ``n`` continuous parameters inside the prior box.

        Returns the samples and the acceptance rate.  Raises
        :class:`LeakageError` once ``max_proposals`` draws have been made
        with an acceptance rate below ``min_acceptance``.
        """
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        ctx = self.target_embedding
        kept, proposed, accepted = [], 0, 0
        chunk = max(256, 2 * n)
        while accepted < n:
            draws = self.flow.sample(chunk, ctx, rng)
            ok = self.prior.contains(draws)
            proposed += chunk
            accepted += int(ok.sum())
            kept.append(draws[ok])
            if proposed >= max_proposals and accepted / proposed < min_acceptance:
                raise LeakageError(f"acceptance {accepted / proposed:.2e} after {proposed} proposals")
            if accepted < n:
                rate = max(accepted / proposed, min_acceptance)
                chunk = int(min(max_proposals, max(256, 1.2 * (n - accepted) / rate)))
        return np.concatenate(kept)[:n], accepted / proposed

    def propose(self, n: int, seed) -> np.ndarray:
        """``n`` integer codes from the posterior, inside ``[0, 1022]``."""
        theta, _ = self.sample(n, seed)
        return np.clip(np.rint(theta), 0, CODE_MAX).astype(np.int64)

    def map_estimate(self, n: int = 2000, seed: int = 0) -> np.ndarray:
        """Highest-density sample among ``n`` posterior draws."""
        theta, _ = self.sample(n, seed)
        return theta[int(np.argmax(self.log_prob(theta)))]

    def save(self, path: str | Path) -> None:
        state = {f"flow.{k}": v for k, v in self.flow.state_dict().items()}
        state.update({f"ae.{k}": v for k, v in self.encoder.state_dict().items()})
        state["x_star"] = np.asarray(self.x_star, dtype=np.float32)
        state["prior_low"] = np.asarray(self.prior.low, dtype=np.float64)
        state["prior_high"] = np.asarray(self.prior.high, dtype=np.float64)
        state["round_index"] = np.array([self.round_index], dtype=np.int64)
        save_checkpoint(path, state)

    @classmethod
    def load(cls, path: str | Path) -> "Posterior":
        state, _ = load_checkpoint(path)
        flow = MAF.from_state({k[5:]: v for k, v in state.items() if k.startswith("flow.")})
        ae = Autoencoder()
        ae.load_state_dict({k[3:]: v for k, v in state.items() if k.startswith("ae.")})
        prior = PriorBox(tuple(state["prior_low"].tolist()), tuple(state["prior_high"].tolist()))
        return cls(flow, ae.eval(), state["x_star"], prior, int(state["round_index"][0]))


def propose(posterior: Posterior, n: int, seed) -> np.ndarray:
    return posterior.propose(n, seed)


# ---------------------------------------------------------------------------
# training

def device_simulator(config: DeviceConfig) -> Simulator:
    def simulate(codes: np.ndarray, seed: int) -> np.ndarray:
        return run_experiment(codes, config, seed)
    return simulate


@dataclass
class RoundMetrics:
    round: int
    train_loss: float
    val_loss: float
    epochs: int
    acceptance_rate: float
    skipped: int
    seconds: float


def _snapshot(flow: MAF, encoder: Autoencoder):
    return flow.state_dict(), encoder.encoder.state_dict()


def _restore(flow: MAF, encoder: Autoencoder, snap) -> None:
    flow.load_state_dict(snap[0])
    encoder.encoder.load_state_dict(snap[1])


def _embed(encoder: Autoencoder, x: np.ndarray, batch: int = 256) -> np.ndarray:
    encoder.eval()
    return np.concatenate([encoder.encode(x[i:i + batch]) for i in range(0, len(x), batch)])


def _train_epoch(flow, encoder, theta, x, cfg, first_round, rng, log_prior, flow_opt,
                 enc_opt) -> float:
    """One pass over ``(theta, x)`` in order; a short final batch is kept if it
    can still supply ``n_atoms`` rows."""
    losses, sizes = [], []
    starts = range(0, len(theta), cfg.batch_size)
    for bi, start in enumerate(starts):
        sl = slice(start, start + cfg.batch_size)
        xb = x[sl]
        if len(xb) < max(2, cfg.n_atoms):
            break
        encoder.encoder.train(not cfg.freeze_encoder)
        flow.zero_grad()
        encoder.encoder.zero_grad()
        ctx = encoder.encode(xb)
        loss, dctx = atomic_loss(flow, theta[sl], ctx, cfg.n_atoms, rng, log_prior,
                                 first_round=first_round, compute_grad=True)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite SNPE loss in batch {bi}")
        flow_opt.step()
        if not cfg.freeze_encoder:
            encoder.encoder.backward(dctx.astype(encoder.dtype)[:, :, None])
            enc_opt.step()
        losses.append(loss)
        sizes.append(len(xb))
    return float(np.average(losses, weights=sizes))


def train_round(flow: MAF, encoder: Autoencoder, theta: np.ndarray, x: np.ndarray,
                cfg: RoundConfig, first_round: bool, rng: np.random.Generator,
                prior: PriorBox, flow_opt: Adam, enc_opt: Adam) -> tuple[float, float, int]:
    """Train on the pooled simulations until validation stalls; keeps the best state.

    The validation loss is evaluated in eval mode over the whole held-out
    split at once (atoms are drawn from the full split with a fixed seed).
    """
    n = len(theta)
    perm = rng.permutation(n)
    n_val = max(cfg.n_atoms, 2, int(round(cfg.val_fraction * n)))
    if n - n_val < cfg.batch_size:
        raise ConfigError(f"{n} simulations leave fewer than one training batch after validation")
    val_idx, tr_idx = np.sort(perm[:n_val]), perm[n_val:]
    log_prior = prior.log_prob
    val_seed = int(rng.integers(2**63 - 1))
    best, best_train, best_epoch, snap = math.inf, math.inf, 0, None
    epoch = 0
    while epoch < cfg.max_epochs and epoch - best_epoch < cfg.patience:
        epoch += 1
        order = tr_idx[rng.permutation(len(tr_idx))]
        train_loss = _train_epoch(flow, encoder, theta[order], x[order], cfg, first_round, rng,
                                  log_prior, flow_opt, enc_opt)
        ctx = _embed(encoder, x[val_idx])
        val_loss, _ = atomic_loss(flow, theta[val_idx], ctx, cfg.n_atoms,
                                  np.random.default_rng(val_seed), log_prior,
                                  first_round=first_round)
        if val_loss < best:
            best, best_train, best_epoch = val_loss, train_loss, epoch
            snap = _snapshot(flow, encoder)
        log.debug("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
    if snap is None:
        raise TrainingError("validation loss was never finite")
    _restore(flow, encoder, snap)
    encoder.eval()
    return best_train, best, epoch


def infer(simulator: Simulator, prior: PriorBox, x_star: np.ndarray, encoder_init: Autoencoder,
          cfg: RoundConfig, seed: int, out_dir: str | Path | None = None,
          on_round: Callable[[int, Posterior], None] | None = None) -> Posterior:
    """Run ``cfg.rounds`` rounds of simulate / train and return the final posterior.

    ``simulator(codes, seed)`` maps integer codes to a normalized trace.
    With ``out_dir`` every round writes ``round_XX.ckpt`` (flow + encoder),
    ``round_XX.bin`` (simulated codes and traces) and appends a line to
    ``metrics.jsonl``.  ``on_round`` is called after each round.
    """
    encoder = copy.deepcopy(encoder_init)
    encoder.eval()
    flow = MAF(prior.dim, encoder.encode(x_star).shape[-1], cfg.flow_transforms, cfg.flow_hidden,
               cfg.flow_hidden_layers, seed=int(np.random.SeedSequence([seed, 0]).generate_state(1)[0]))
    posterior = Posterior(flow, encoder, np.asarray(x_star, dtype=np.float32), prior, 0)
    flow_opt = Adam(flow.parameters(), lr=cfg.flow_lr)
    enc_opt = Adam(encoder.encoder.parameters(), lr=cfg.encoder_lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
    thetas, xs = [], []
    for r in range(1, cfg.rounds + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        if r == 1:
            theta = prior.sample(cfg.sims_per_round, rng)
            acceptance = 1.0
        else:
            theta, acceptance = posterior.sample(cfg.sims_per_round, rng)
        codes = np.clip(np.rint(theta), 0, CODE_MAX).astype(np.int64)
        sim_seeds = rng.integers(0, 2**63 - 1, size=len(codes))
        traces, ok = [], []
        for i, (c, s) in enumerate(zip(codes, sim_seeds)):
            try:
                traces.append(simulator(c, int(s)))
                ok.append(i)
            except Exception as exc:
                log.warning("round %d: simulation %d skipped: %s", r, i, exc)
        skipped = len(codes) - len(ok)
        if skipped > cfg.max_skip_fraction * len(codes):
            raise SimulationError(ok[-1] + 1 if ok else 0,
                                  RuntimeError(f"{skipped} of {len(codes)} simulations failed in round {r}"))
        theta, codes = theta[ok], codes[ok]
        x = np.stack(traces).astype(np.float32)
        if r == 1:
            flow.set_standardization(theta, _embed(encoder, x))
        if cfg.accumulate:
            thetas.append(theta)
            xs.append(x)
            theta_train, x_train = np.concatenate(thetas), np.concatenate(xs)
        else:
            theta_train, x_train = theta, x
        train_loss, val_loss, epochs = train_round(flow, encoder, theta_train, x_train, cfg,
                                                   r == 1, rng, prior, flow_opt, enc_opt)
        posterior.round_index = r
        metrics = RoundMetrics(r, train_loss, val_loss, epochs, acceptance, skipped,
                               time.perf_counter() - t0)
        log.info("round %d: train %.4f val %.4f epochs %d acceptance %.3f (%.0fs)", r,
                 train_loss, val_loss, epochs, acceptance, metrics.seconds)
        if out is not None:
            posterior.save(out / f"round_{r:02d}.ckpt")
            ds_io.save(ds_io.Dataset(x, codes.astype(np.uint16), master_seed=seed),
                       out / f"round_{r:02d}.bin")
            with open(out / "metrics.jsonl", "a") as fh:
                # wall time stays in the log so reruns write identical files
                record = {k: v for k, v in asdict(metrics).items() if k != "seconds"}
                fh.write(json.dumps(record) + "\n")
        if on_round is not None:
            on_round(r, posterior)
    return posterior
