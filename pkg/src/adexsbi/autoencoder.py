"""Convolutional autoencoder compressing 1024-sample traces to 32 features."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, TrainingError
from .neuron import TRACE_LENGTH
from .nn import (Adam, BatchNorm1d, Conv1d, LrSchedule, MaxPool1d, ReLU, Sequential, Upsample,
                 load_checkpoint, mse_loss, mse_loss_backward, save_checkpoint)

log = logging.getLogger(__name__)

EMBEDDING_DIM = 32

# (in, out, kernel, batchnorm) per encoder conv; every conv is followed by
# ReLU, the optional batchnorm and a factor-2 max pool.
ENCODER_SPEC = [(1, 32, 5, True), (32, 16, 3, True), (16, 64, 11, False),
                (64, 128, 13, False), (128, 1, 3, False)]
# (in, out, kernel, relu) per decoder conv; each is followed by a x2 upsample.
DECODER_SPEC = [(1, 128, 3, True), (128, 64, 13, True), (64, 16, 11, True),
                (16, 32, 3, True), (32, 1, 5, False)]


class Autoencoder:
    """Convolutional encoder/decoder pair with a 32-feature bottleneck.

    ``output_init_scale`` shrinks the He-uniform weights of the final
    (activation-free) decoder conv.  With full-size weights the untrained
    decoder emits outputs of order 5 on [0, 1] inputs, and the resulting
    early gradients drive the ReLU bottleneck dead within a few dozen steps.
    """

    def __init__(self, seed: int = 0, dtype=np.float32, output_init_scale: float = 0.1):
        rng = np.random.default_rng(seed)
        enc = []
        for cin, cout, k, bn in ENCODER_SPEC:
            enc += [Conv1d(cin, cout, k, rng, dtype), ReLU()]
            if bn:
                enc.append(BatchNorm1d(cout, dtype=dtype))
            enc.append(MaxPool1d())
        dec = []
        for cin, cout, k, relu in DECODER_SPEC:
            dec.append(Conv1d(cin, cout, k, rng, dtype))
            if relu:
                dec.append(ReLU())
            dec.append(Upsample())
        dec[-2].weight.data *= dtype(output_init_scale)
        self.encoder = Sequential(*enc)
        self.decoder = Sequential(*dec)
        # inputs are data; skip the first layer's input gradient
        self.encoder[0].needs_input_grad = False

    # -- plumbing ---------------------------------------------------------
    def parameters(self):
        out = {f"encoder.{k}": p for k, p in self.encoder.parameters().items()}
        out.update({f"decoder.{k}": p for k, p in self.decoder.parameters().items()})
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.state_dict().items()})
        return out

    def load_state_dict(self, state) -> None:
        self.encoder.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("encoder.")})
        self.decoder.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("decoder.")})

    def train(self, mode: bool = True) -> "Autoencoder":
        self.encoder.train(mode)
        self.decoder.train(mode)
        return self

    def eval(self) -> "Autoencoder":
        return self.train(False)

    def astype(self, dtype) -> "Autoencoder":
        self.encoder.astype(dtype)
        self.decoder.astype(dtype)
        return self

    def zero_grad(self) -> None:
        self.encoder.zero_grad()
        self.decoder.zero_grad()

    @property
    def dtype(self):
        return self.encoder[0].weight.data.dtype

    def save(self, path, optimizer: Adam | None = None) -> None:
        save_checkpoint(path, self.state_dict(), optimizer.state_dict() if optimizer else None)

    @classmethod
    def load(cls, path) -> "Autoencoder":
        state, _ = load_checkpoint(path)
        model = cls()
        model.load_state_dict(state)
        return model.eval()

    # -- computation --------------------------------------------------------
    def _as_batch(self, traces: np.ndarray) -> np.ndarray:
        x = np.asarray(traces, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None, :, None]
        elif x.ndim == 2:
            x = x[:, :, None]
        if x.ndim != 3 or x.shape[1:] != (TRACE_LENGTH, 1):
            raise ShapeError(f"expected traces of length {TRACE_LENGTH}, got shape {np.shape(traces)}")
        return x

    def forward(self, traces: np.ndarray) -> np.ndarray:
        """Reconstruction ``(N, 1024, 1)`` for a batch of traces ``(N, 1024)``.

        Activations are channels-last throughout.
        """
        return self.decoder.forward(self.encoder.forward(self._as_batch(traces)))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self.encoder.backward(self.decoder.backward(grad))

    def encode(self, traces: np.ndarray) -> np.ndarray:
        """Embeddings ``(N, 32)`` (or ``(32,)`` for a single trace) in the current mode."""
        single = np.ndim(traces) == 1
        z = self.encoder.forward(self._as_batch(traces))[:, :, 0]
        return z[0] if single else z

    def reconstruct(self, traces: np.ndarray) -> np.ndarray:
        single = np.ndim(traces) == 1
        y = self.forward(traces)[:, :, 0]
        return y[0] if single else y

    def shape_probe(self) -> list[tuple[str, tuple[int, int]]]:
        """(layer name, (channels, length)) after every non-activation layer."""
        x = np.zeros((2, TRACE_LENGTH, 1), dtype=self.dtype)
        rows = []
        was_training = self.encoder.training
        self.eval()
        for layer in list(self.encoder) + list(self.decoder):
            x = layer.forward(x)
            if isinstance(layer, ReLU):
                continue
            rows.append((type(layer).__name__, (x.shape[2], x.shape[1])))
        self.train(was_training)
        return rows

    def layer_parameter_counts(self) -> list[tuple[str, int]]:
        return [(type(layer).__name__, layer.num_parameters())
                for layer in list(self.encoder) + list(self.decoder)
                if layer.num_parameters()]


def build(seed: int = 0) -> Autoencoder:
    return Autoencoder(seed)


def encode(model: Autoencoder, trace: np.ndarray) -> np.ndarray:
    return model.eval().encode(trace)


def reconstruct(model: Autoencoder, trace: np.ndarray) -> np.ndarray:
    return model.eval().reconstruct(trace)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_std: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_checkpoint: Path | None = None
    first_checkpoint: Path | None = None

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "val_std", "lr"])
            for i, row in enumerate(zip(self.train_loss, self.val_loss, self.val_std, self.lr), 1):
                w.writerow([i, *(repr(float(v)) for v in row)])


def evaluate(model: Autoencoder, traces: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Per-batch MSE losses in eval mode (batches of ``batch_size``)."""
    model.eval()
    losses = []
    for start in range(0, len(traces), batch_size):
        x = model._as_batch(traces[start:start + batch_size])
        losses.append(mse_loss(model.forward(x), x))
    return np.array(losses)


def per_trace_mse(model: Autoencoder, traces: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(traces), batch_size):
        x = model._as_batch(traces[start:start + batch_size])
        out.append(np.mean((model.forward(x) - x) ** 2, axis=(1, 2), dtype=np.float64))
    return np.concatenate(out)


def train(model: Autoencoder, train_set: np.ndarray, val_set: np.ndarray, epochs: int = 150,
          batch_size: int = 32, schedule: LrSchedule | None = None, seed: int = 0,
          checkpoint_dir: str | Path | None = None, log_csv: str | Path | None = None,
          keep_first: bool = False) -> TrainReport:
    """Minimize reconstruction MSE with Adam under a warmup/decay schedule.

    Batches come from a seeded reshuffle every epoch; the final short batch
    is dropped.  Validation loss is the mean over 32-trace batches.  Whenever
    the epoch-mean validation loss improves the model is checkpointed to
    ``checkpoint_dir/best.ckpt``; ``keep_first`` additionally stores the
    epoch-1 model as ``epoch1.ckpt``.
    """
    if len(train_set) < batch_size or len(val_set) == 0:
        raise ValueError("training needs at least one full batch and a non-empty validation set")
    schedule = schedule or LrSchedule()
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=schedule.base_lr)
    report = TrainReport()
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    best = math.inf
    best_state = None
    global_batch = 0
    n_batches = len(train_set) // batch_size
    for epoch in range(1, epochs + 1):
        model.train()
        order = rng.permutation(len(train_set))
        losses = []
        lr = schedule.lr_at(global_batch, epoch)
        for bi in range(n_batches):
            idx = np.sort(order[bi * batch_size:(bi + 1) * batch_size])
            x = model._as_batch(train_set[idx])
            lr = schedule.lr_at(global_batch, epoch)
            model.zero_grad()
            y = model.forward(x)
            loss = mse_loss(y, x)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            model.backward(mse_loss_backward(y, x))
            opt.step(lr)
            losses.append(loss)
            global_batch += 1
        val = evaluate(model, val_set, batch_size)
        report.train_loss.append(float(np.mean(losses)))
        report.val_loss.append(float(np.mean(val)))
        report.val_std.append(float(np.std(val)))
        report.lr.append(lr)
        log.info("epoch %d train %.6f val %.6f lr %.3g", epoch, report.train_loss[-1],
                 report.val_loss[-1], lr)
        if keep_first and epoch == 1 and ckdir is not None:
            report.first_checkpoint = ckdir / "epoch1.ckpt"
            model.save(report.first_checkpoint)
        if report.val_loss[-1] < best:
            best = report.val_loss[-1]
            report.best_epoch = epoch
            best_state = model.state_dict()
            if ckdir is not None:
                report.best_checkpoint = ckdir / "best.ckpt"
                model.save(report.best_checkpoint, opt)
        if log_csv is not None:
            report.write_csv(log_csv)
    model.load_state_dict(best_state)
    model.eval()
    return report
