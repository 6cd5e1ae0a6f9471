"""Trace/parameter datasets: generation, splitting and the binary file format.

File layout (little-endian)::

    b"ADEXDS1\\0"
    u64 rows | u32 trace length (1024) | u32 param count (4)
    32 bytes device-config SHA-256 | u64 master seed
    rows x 1024 float32 traces, row-major
    rows x 4 uint16 parameter codes
    u64 checksum (blake2b-64 over header and payload)
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import checksum64
from .errors import (BadMagicError, ChecksumMismatchError, ConfigError, FormatError, ShapeError,
                     SimulationError, TruncatedPayloadError)
from .neuron import CODE_MAX, TRACE_LENGTH, DeviceConfig, run_experiment, trial_seed

log = logging.getLogger(__name__)

MAGIC = b"ADEXDS1\0"
_HEADER = struct.Struct("<QII32sQ")
N_PARAMS = 4


@dataclass
class Dataset:
    traces: np.ndarray
    params: np.ndarray
    config_hash: str = "0" * 64
    master_seed: int = 0

    def __post_init__(self):
        self.traces = np.asarray(self.traces, dtype=np.float32)
        self.params = np.asarray(self.params, dtype=np.uint16)
        if self.traces.ndim != 2 or self.traces.shape[1] != TRACE_LENGTH:
            raise ShapeError(f"traces must be (N, {TRACE_LENGTH}), got {self.traces.shape}")
        if self.params.shape != (len(self.traces), N_PARAMS):
            raise ShapeError(f"params must be ({len(self.traces)}, {N_PARAMS}), got {self.params.shape}")
        if len(bytes.fromhex(self.config_hash)) != 32:
            raise ValueError("config_hash must be a 64-digit hex string")

    def __len__(self) -> int:
        return len(self.traces)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.traces[idx], self.params[idx], self.config_hash, self.master_seed)

    def check_invariants(self) -> None:
        if np.any(self.traces < 0) or np.any(self.traces > 1):
            raise ValueError("trace values outside [0, 1]")
        if np.any(self.params > CODE_MAX):
            raise ValueError(f"codes above {CODE_MAX}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.config_hash == other.config_hash and self.master_seed == other.master_seed
                and np.array_equal(self.traces, other.traces)
                and np.array_equal(self.params, other.params))


def row_draw(master_seed: int, index: int) -> tuple[np.ndarray, int]:
    """Codes and trial seed of dataset row ``index``; independent of other rows."""
    rng = np.random.default_rng(trial_seed(master_seed, index))
    codes = rng.integers(0, CODE_MAX + 1, size=N_PARAMS)
    return codes, int(rng.integers(0, 2**63 - 1))


def _generate_rows(args) -> tuple[np.ndarray, np.ndarray]:
    config, master_seed, start, stop = args
    traces = np.empty((stop - start, TRACE_LENGTH), dtype=np.float32)
    params = np.empty((stop - start, N_PARAMS), dtype=np.uint16)
    for i in range(start, stop):
        codes, seed = row_draw(master_seed, i)
        try:
            traces[i - start] = run_experiment(codes, config, seed)
        except Exception as exc:
            raise SimulationError(i, exc) from exc
        params[i - start] = codes
    return traces, params


def generate(n: int, config: DeviceConfig, master_seed: int, workers: int = 1,
             chunk: int = 2000) -> Dataset:
    """Draw ``n`` code vectors uniformly from {0..1022}^4 and simulate each once."""
    if n < 1:
        raise ConfigError("dataset size must be at least 1")
    jobs = [(config, master_seed, s, min(n, s + chunk)) for s in range(0, n, chunk)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_generate_rows, jobs))
    else:
        parts = []
        for job in jobs:
            parts.append(_generate_rows(job))
            log.info("generated %d / %d rows", job[3], n)
    traces = np.concatenate([p[0] for p in parts])
    params = np.concatenate([p[1] for p in parts])
    return Dataset(traces, params, config.hash(), master_seed)


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ConfigError("split needs three positive ratios")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios sum to {sum(self.ratios)}, not 1")


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded shuffle, then floor-sized validation/test blocks; the remainder trains."""
    if n < 1:
        raise ConfigError("cannot split an empty dataset")
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_val = math.floor(n * spec.ratios[1] + 1e-9)
    n_test = math.floor(n * spec.ratios[2] + 1e-9)
    n_train = n - n_val - n_test
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    tr, va, te = split_indices(len(ds), spec)
    return ds.subset(tr), ds.subset(va), ds.subset(te)


def save(ds: Dataset, path: str | Path) -> None:
    header = MAGIC + _HEADER.pack(len(ds), TRACE_LENGTH, N_PARAMS, bytes.fromhex(ds.config_hash),
                                  ds.master_seed)
    traces = np.ascontiguousarray(ds.traces, dtype="<f4").tobytes()
    params = np.ascontiguousarray(ds.params, dtype="<u2").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(traces)
        fh.write(params)
        fh.write(struct.pack("<Q", checksum64(header, traces, params)))
    tmp.replace(path)


def load(path: str | Path, mmap: bool = False) -> Dataset:
    """Read a dataset file, verifying magic, size and checksum.

    With ``mmap`` the trace block is memory-mapped read-only instead of
    copied (the checksum is still verified once).
    """
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + _HEADER.size)
    if head[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {head[:len(MAGIC)]!r}")
    if len(head) < len(MAGIC) + _HEADER.size:
        raise TruncatedPayloadError(f"{path}: truncated header")
    rows, length, n_params, digest, seed = _HEADER.unpack(head[len(MAGIC):])
    if length != TRACE_LENGTH or n_params != N_PARAMS:
        raise FormatError(f"{path}: unsupported layout {length}x{n_params}")
    off_traces = len(head)
    off_params = off_traces + rows * length * 4
    off_sum = off_params + rows * n_params * 2
    if size < off_sum + 8:
        raise TruncatedPayloadError(f"{path}: truncated payload ({size} bytes, expected {off_sum + 8})")
    if size > off_sum + 8:
        raise FormatError(f"{path}: {size - off_sum - 8} trailing bytes")
    raw = np.memmap(path, dtype=np.uint8, mode="r")
    (stored,) = struct.unpack("<Q", bytes(raw[off_sum:off_sum + 8]))
    if stored != checksum64(memoryview(raw[:off_sum])):
        raise ChecksumMismatchError(f"{path}: checksum mismatch")
    traces = np.ndarray((rows, length), dtype="<f4", buffer=raw, offset=off_traces)
    params = np.ndarray((rows, n_params), dtype="<u2", buffer=raw, offset=off_params)
    if not mmap:
        traces, params = traces.copy(), params.copy()
        del raw
    ds = Dataset.__new__(Dataset)
    ds.traces = traces.astype(np.float32, copy=False)
    ds.params = params.astype(np.uint16, copy=False)
    ds.config_hash = digest.hex()
    ds.master_seed = seed
    return ds
