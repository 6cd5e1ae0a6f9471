"""Run configuration, posterior analysis, plot export and the staged pipeline.

The command-line front end lives in :mod:`adexsbi.cli`; everything here is
usable from Python as well.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autoencoder as ae_mod
from . import dataset as ds_mod
from .autoencoder import Autoencoder
from .errors import ConfigError, StageError
from .neuron import (CODE_MAX, PARAM_NAMES, RAW_LENGTH, TRACE_LENGTH, DeviceConfig,
                     parse_key_value_text, run_experiment, run_experiment_detailed)
from .nn import LrSchedule
from .snpe import Posterior, PriorBox, RoundConfig, device_simulator, infer
from .svg import histogram_grid_svg, lines_svg, scatter_grid_svg

log = logging.getLogger(__name__)

DEFAULT_SPIKE_THRESHOLD = 0.70


def trace_times(duration: float = 1000.0) -> np.ndarray:
    """Biological time [ms] of each of the 1024 resampled trace points."""
    return np.linspace(0.0, RAW_LENGTH - 1, TRACE_LENGTH) * (duration / RAW_LENGTH)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class DatasetSettings:
    size: int = 5000
    split: str = "0.8,0.1,0.1"
    workers: int = 1

    @property
    def ratios(self) -> tuple[float, float, float]:
        try:
            parts = tuple(float(p) for p in self.split.split(","))
        except ValueError:
            raise ConfigError(f"dataset.split: cannot parse {self.split!r}") from None
        if len(parts) != 3:
            raise ConfigError("dataset.split needs three comma-separated ratios")
        return parts


@dataclass
class AESettings:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 1e-4
    # 150-epoch schedule squeezed into ``epochs`` when true
    compress_schedule: bool = True


@dataclass
class SNPESettings(RoundConfig):
    target_codes: str = "200,500,200,300"

    @property
    def target(self) -> np.ndarray:
        try:
            codes = np.array([int(c) for c in self.target_codes.split(",")])
        except ValueError:
            raise ConfigError(f"snpe.target_codes: cannot parse {self.target_codes!r}") from None
        if codes.shape != (4,) or codes.min() < 0 or codes.max() > CODE_MAX:
            raise ConfigError(f"snpe.target_codes must be four codes in [0, {CODE_MAX}]")
        return codes

    def round_config(self) -> RoundConfig:
        names = {f.name for f in dataclasses.fields(RoundConfig)}
        return RoundConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})


@dataclass
class AnalysisSettings:
    n_samples: int = 500
    n_predictive: int = 4
    n_baseline: int = 10
    spike_threshold: float = DEFAULT_SPIKE_THRESHOLD
    bins: int = 32


_SECTIONS = {"dataset": DatasetSettings, "ae": AESettings, "snpe": SNPESettings,
             "analysis": AnalysisSettings}


def _convert(section: str, name: str, kind, raw):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("1", "true", "yes", "on"):
                return True
            if str(raw).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is int:
            value = float(raw)
            if value != int(value):
                raise ValueError
            return int(value)
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{name}: cannot parse {raw!r} as {kind.__name__}") from None


@dataclass
class RunConfig:
    """All settings of a pipeline run, addressed as flat ``section.key`` pairs.

    ``device.config`` may name a device-config file; other ``device.*`` keys
    override individual device settings.
    """

    device: DeviceConfig = field(default_factory=DeviceConfig)
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    ae: AESettings = field(default_factory=AESettings)
    snpe: SNPESettings = field(default_factory=SNPESettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)

    @classmethod
    def from_mapping(cls, values: dict[str, str], base_dir: Path | None = None) -> "RunConfig":
        device_values: dict[str, str] = {}
        sections: dict[str, dict] = {name: {} for name in _SECTIONS}
        device_file = None
        for key, raw in values.items():
            section, _, name = key.partition(".")
            if not name:
                raise ConfigError(f"config key {key!r} lacks a section prefix")
            if section == "device":
                if name == "config":
                    device_file = Path(raw)
                    if base_dir is not None and not device_file.is_absolute():
                        device_file = base_dir / device_file
                else:
                    device_values[name] = raw
                continue
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section {section!r} in key {key!r}")
            types = {f.name: f.type for f in dataclasses.fields(_SECTIONS[section])}
            if name not in types:
                raise ConfigError(f"unknown config key {key!r}")
            default = getattr(_SECTIONS[section](), name)
            sections[section][name] = _convert(section, name, type(default), raw)
        merged = {}
        if device_file is not None:
            if not device_file.is_file():
                raise ConfigError(f"device config file not found: {device_file}")
            merged.update(parse_key_value_text(device_file.read_text()))
        merged.update(device_values)
        try:
            built = {name: _SECTIONS[name](**kw) for name, kw in sections.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls(DeviceConfig.from_mapping(merged), **built)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict[str, str] | None = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values = parse_key_value_text(path.read_text())
        values.update(overrides or {})
        return cls.from_mapping(values, path.parent)

    def validate(self) -> None:
        self.dataset.ratios  # noqa: B018 - parses
        ds_mod.SplitSpec(self.dataset.ratios)
        self.snpe.target  # noqa: B018
        self.snpe.round_config()
        if self.dataset.size < 3:
            raise ConfigError("dataset.size must be at least 3")
        if self.ae.epochs < 1 or self.ae.batch_size < 2:
            raise ConfigError("ae.epochs must be >= 1 and ae.batch_size >= 2")
        a = self.analysis
        if a.n_samples < 2 or a.n_predictive < 1 or a.n_baseline < 10 or a.bins < 1:
            raise ConfigError("analysis needs n_samples >= 2, n_predictive >= 1, n_baseline >= 10")

    def section_items(self, section: str) -> list[tuple[str, str]]:
        if section == "device":
            return [(f"device.{f.name}", repr(getattr(self.device, f.name)))
                    for f in dataclasses.fields(DeviceConfig)]
        obj = getattr(self, section)
        return [(f"{section}.{f.name}", repr(getattr(obj, f.name))) for f in dataclasses.fields(obj)]

    def to_text(self, sections=("device", *_SECTIONS)) -> str:
        return "".join(f"{k} = {v}\n" for s in sections for k, v in self.section_items(s))

    def hash(self, sections=("device", *_SECTIONS)) -> str:
        return hashlib.sha256(self.to_text(sections).encode()).hexdigest()


def stage_seed(seed: int, stage: str) -> int:
    """Seed of one pipeline stage, derived from the run's master seed."""
    salt = int.from_bytes(hashlib.sha256(stage.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([int(seed), salt]).generate_state(2, np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# metrics

def spike_times(trace: np.ndarray, threshold: float = DEFAULT_SPIKE_THRESHOLD,
                refractory: int = 1, duration: float = 1000.0) -> np.ndarray:
    """Times [ms] of upward threshold crossings, linearly interpolated.

    A crossing within ``refractory`` samples of the previous one is ignored.
    """
    v = np.asarray(trace, dtype=np.float64)
    idx = np.flatnonzero((v[:-1] < threshold) & (v[1:] >= threshold)) + 1
    kept = []
    for i in idx:
        if not kept or i - kept[-1] > refractory:
            kept.append(i)
    kept = np.asarray(kept, dtype=np.int64)
    frac = (threshold - v[kept - 1]) / (v[kept] - v[kept - 1])
    step = duration * (RAW_LENGTH - 1) / RAW_LENGTH / (len(v) - 1)
    return (kept - 1 + frac) * step


def trace_metrics(a: np.ndarray, b: np.ndarray, threshold: float = DEFAULT_SPIKE_THRESHOLD,
                  refractory: int = 1) -> tuple[float, int, np.ndarray]:
    """``(mse, spike_count_delta, spike_time_deltas)`` of ``b`` relative to ``a``.

    The count delta is ``count(b) - count(a)``; time deltas [ms] cover the
    first ``min`` of both counts.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"trace shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    ta = spike_times(a, threshold, refractory)
    tb = spike_times(b, threshold, refractory)
    m = min(len(ta), len(tb))
    return mse, len(tb) - len(ta), tb[:m] - ta[:m]


@dataclass
class PredictiveReport:
    samples: np.ndarray
    predictive_codes: np.ndarray
    predictive_traces: np.ndarray
    predictive_mse: np.ndarray
    spike_count_delta: np.ndarray
    spike_time_deltas: list[np.ndarray]
    baseline_traces: np.ndarray
    baseline_mse: np.ndarray
    correlations: np.ndarray
    target: np.ndarray
    target_codes: np.ndarray | None = None
    flags: list[str] = field(default_factory=list)

    @property
    def baseline_median_mse(self) -> float:
        return float(np.median(self.baseline_mse))

    @property
    def predictive_median_mse(self) -> float:
        return float(np.median(self.predictive_mse))

    @property
    def corr_b_gtauw(self) -> float:
        return float(self.correlations[1, 2])

    def median(self) -> np.ndarray:
        return np.median(self.samples, axis=0)

    def credible_interval(self, level: float = 0.95) -> np.ndarray:
        lo = (1 - level) / 2
        return np.quantile(self.samples, [lo, 1 - lo], axis=0).T

    def summary(self) -> dict:
        out = {
            "n_samples": len(self.samples),
            "median": self.median().tolist(),
            "ci95": self.credible_interval().tolist(),
            "predictive_mse": self.predictive_mse.tolist(),
            "predictive_median_mse": self.predictive_median_mse,
            "baseline_median_mse": self.baseline_median_mse,
            "spike_count_delta": self.spike_count_delta.tolist(),
            "first_two_spike_deltas_ms": [d[:2].tolist() for d in self.spike_time_deltas],
            "corr_b_gtauw": self.corr_b_gtauw,
            "correlations": self.correlations.tolist(),
            "flags": list(self.flags),
        }
        if self.target_codes is not None:
            out["target_codes"] = np.asarray(self.target_codes).tolist()
        return out


def _correlations(samples: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.corrcoef(samples, rowvar=False)


def shows_adaptation(trace: np.ndarray, threshold: float = DEFAULT_SPIKE_THRESHOLD) -> bool:
    """True if inter-spike intervals grow from the first to the last pair."""
    t = spike_times(trace, threshold)
    if len(t) < 3:
        return False
    isi = np.diff(t)
    return bool(isi[-1] > isi[0])


def analyze_posterior(posterior: Posterior, simulator: Callable[[np.ndarray, int], np.ndarray],
                      n: int = 500, seed: int = 0, n_predictive: int = 4, n_baseline: int = 10,
                      target_codes: np.ndarray | None = None,
                      threshold: float = DEFAULT_SPIKE_THRESHOLD) -> PredictiveReport:
    """Sample the posterior, simulate predictive draws and a trial baseline.

    The baseline repeats the experiment ``n_baseline`` times at
    ``target_codes`` (required for it) and records each trial's MSE against
    the target trace.
    """
    if target_codes is None:
        raise ValueError("target_codes are required for the trial-to-trial baseline")
    if n_baseline < 10:
        raise ValueError("the trial-to-trial baseline needs at least 10 trials")
    s_sample, s_pred, s_base = np.random.SeedSequence(seed).spawn(3)
    samples, _ = posterior.sample(n, np.random.default_rng(s_sample))
    samples = np.clip(np.rint(samples), 0, CODE_MAX)
    pred_rng = np.random.default_rng(s_pred)
    pick = pred_rng.choice(n, size=n_predictive, replace=False)
    pred_codes = samples[pick].astype(np.int64)
    target = np.asarray(posterior.x_star, dtype=np.float64)
    pred_seeds = pred_rng.integers(0, 2**63 - 1, size=n_predictive)
    pred = np.stack([simulator(c, int(s)) for c, s in zip(pred_codes, pred_seeds)])
    base_seeds = np.random.default_rng(s_base).integers(0, 2**63 - 1, size=n_baseline)
    base = np.stack([simulator(np.asarray(target_codes), int(s)) for s in base_seeds])
    pm = [trace_metrics(target, p, threshold) for p in pred]
    report = PredictiveReport(
        samples=samples,
        predictive_codes=pred_codes,
        predictive_traces=pred,
        predictive_mse=np.array([m[0] for m in pm]),
        spike_count_delta=np.array([m[1] for m in pm], dtype=np.int64),
        spike_time_deltas=[m[2] for m in pm],
        baseline_traces=base,
        baseline_mse=np.array([trace_metrics(target, b, threshold)[0] for b in base]),
        correlations=_correlations(samples),
        target=target,
        target_codes=np.asarray(target_codes),
    )
    if shows_adaptation(target, threshold) and not report.corr_b_gtauw < 0:
        report.flags.append("corr_b_gtauw_not_negative")
    return report


# ---------------------------------------------------------------------------
# export

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path: str | Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def export_report(report: PredictiveReport, out_dir: str | Path, bins: int = 32) -> list[Path]:
    """Write plot-ready CSVs, SVG renderings and ``report.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(PARAM_NAMES)
    written = []

    def emit(name, header, rows):
        write_csv(out / name, header, rows)
        written.append(out / name)

    emit("samples.csv", names, report.samples.astype(np.int64).tolist())
    edges = np.linspace(0, CODE_MAX, bins + 1)
    hist_rows, hists = [], []
    for j, name in enumerate(names):
        counts, _ = np.histogram(report.samples[:, j], bins=edges)
        hists.append((name, edges, counts))
        hist_rows += [(name, edges[i], edges[i + 1], int(c)) for i, c in enumerate(counts)]
    emit("marginals.csv", ["parameter", "bin_low", "bin_high", "count"], hist_rows)
    pairs = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    emit("pairs.csv", ["x_parameter", "y_parameter", "x", "y"],
         [(names[i], names[j], int(s[i]), int(s[j])) for i, j in pairs for s in report.samples])
    emit("correlations.csv", ["parameter", *names],
         [(names[i], *report.correlations[i]) for i in range(4)])
    t = trace_times()
    k, m = len(report.predictive_traces), len(report.baseline_traces)
    emit("predictive_traces.csv",
         ["time_ms", "target", *(f"predictive_{i}" for i in range(k)), *(f"baseline_{i}" for i in range(m))],
         zip(t, report.target, *report.predictive_traces, *report.baseline_traces))
    rows = []
    for i in range(k):
        d = report.spike_time_deltas[i]
        rows.append(("predictive", i, *report.predictive_codes[i], report.predictive_mse[i],
                     int(report.spike_count_delta[i]),
                     d[0] if len(d) > 0 else "", d[1] if len(d) > 1 else ""))
    for i in range(m):
        rows.append(("baseline", i, *np.asarray(report.target_codes), report.baseline_mse[i], "", "", ""))
    emit("predictive_metrics.csv",
         ["kind", "index", *names, "mse", "spike_count_delta", "spike1_delta_ms", "spike2_delta_ms"], rows)
    svgs = {
        "marginals.svg": histogram_grid_svg(hists),
        "pairs.svg": scatter_grid_svg(names, report.samples, (0, CODE_MAX)),
        "predictive.svg": lines_svg(t, [("target", report.target)]
                                    + [(f"predictive {i}", p) for i, p in enumerate(report.predictive_traces)]
                                    + [(f"baseline {i}", b) for i, b in enumerate(report.baseline_traces)],
                                    x_label="time [ms]", y_label="membrane (normalized)"),
    }
    for name, text in svgs.items():
        (out / name).write_text(text, encoding="utf-8")
        written.append(out / name)
    (out / "report.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    written.append(out / "report.json")
    return written


# ---------------------------------------------------------------------------
# single commands

def cmd_simulate(config: DeviceConfig, codes, seed: int, out: str | Path,
                 spikes_out: str | Path | None = None) -> np.ndarray:
    """Simulate one trial and write ``time, value`` CSV (1024 rows)."""
    exp = run_experiment_detailed(codes, config, seed)
    header = ["time_ms", f"membrane_normalized_adc[0-1] config_sha256={config.hash()}"]
    write_csv(out, header, zip(trace_times(config.duration), exp.normalized))
    if spikes_out is not None:
        write_csv(spikes_out, ["spike", "time_ms"], enumerate(exp.raw.spike_times))
    return exp.normalized


def make_target(cfg: RunConfig, seed: int) -> np.ndarray:
    return run_experiment(cfg.snpe.target, cfg.device, seed)


# ---------------------------------------------------------------------------
# staged pipeline

STAGES = ("generate", "train-ae", "infer", "analyze")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stage_key(cfg: RunConfig, seed: int, stage: str) -> str:
    sections = {"generate": ("device", "dataset"), "train-ae": ("device", "dataset", "ae"),
                "infer": ("device", "dataset", "ae", "snpe"),
                "analyze": ("device", "dataset", "ae", "snpe", "analysis")}[stage]
    return hashlib.sha256(f"{cfg.hash(sections)}:{seed}:{stage}".encode()).hexdigest()


def _run_generate(cfg: RunConfig, seed: int, out: Path) -> list[Path]:
    ds = ds_mod.generate(cfg.dataset.size, cfg.device, stage_seed(seed, "generate"),
                         workers=cfg.dataset.workers)
    ds_mod.save(ds, out / "dataset.bin")
    return [out / "dataset.bin"]


def train_autoencoder(cfg: RunConfig, ds: ds_mod.Dataset, seed: int, out_dir: Path):
    """Split, train and return ``(model, report, test_set)``."""
    tr, va, te = ds_mod.split(ds, ds_mod.SplitSpec(cfg.dataset.ratios, seed))
    if len(tr) < cfg.ae.batch_size:
        raise ConfigError("training split is smaller than one autoencoder batch")
    if cfg.ae.compress_schedule:
        sched = LrSchedule.compressed(cfg.ae.epochs, len(tr) // cfg.ae.batch_size)
        sched = dataclasses.replace(sched, base_lr=cfg.ae.base_lr)
    else:
        sched = LrSchedule(base_lr=cfg.ae.base_lr)
    model = ae_mod.build(seed)
    report = ae_mod.train(model, tr.traces, va.traces, epochs=cfg.ae.epochs,
                          batch_size=cfg.ae.batch_size, schedule=sched, seed=seed,
                          checkpoint_dir=out_dir, log_csv=out_dir / "train.csv")
    return model, report, te


def _run_train_ae(cfg: RunConfig, seed: int, out: Path) -> list[Path]:
    ds = ds_mod.load(out / "dataset.bin")
    ae_dir = out / "ae"
    model, report, te = train_autoencoder(cfg, ds, stage_seed(seed, "train-ae"), ae_dir)
    mse = ae_mod.per_trace_mse(model, te.traces) if len(te) else np.zeros(0)
    write_csv(ae_dir / "test_mse.csv", ["row", "mse"], enumerate(mse))
    return [ae_dir / "best.ckpt", ae_dir / "train.csv", ae_dir / "test_mse.csv"]


def _run_infer(cfg: RunConfig, seed: int, out: Path) -> list[Path]:
    s = stage_seed(seed, "infer")
    encoder = Autoencoder.load(out / "ae" / "best.ckpt")
    x_star = make_target(cfg, stage_seed(seed, "target"))
    snpe_dir = out / "snpe"
    post = infer(device_simulator(cfg.device), PriorBox(), x_star, encoder, cfg.snpe.round_config(),
                 s, out_dir=snpe_dir)
    post.save(out / "posterior.ckpt")
    write_csv(out / "target.csv", ["time_ms", "value"], zip(trace_times(cfg.device.duration), x_star))
    rounds = [snpe_dir / f"round_{r:02d}.{ext}" for r in range(1, cfg.snpe.rounds + 1)
              for ext in ("ckpt", "bin")]
    return [out / "posterior.ckpt", out / "target.csv", snpe_dir / "metrics.jsonl", *rounds]


def _run_analyze(cfg: RunConfig, seed: int, out: Path) -> list[Path]:
    post = Posterior.load(out / "posterior.ckpt")
    a = cfg.analysis
    report = analyze_posterior(post, device_simulator(cfg.device), a.n_samples,
                               stage_seed(seed, "analyze"), a.n_predictive, a.n_baseline,
                               cfg.snpe.target, a.spike_threshold)
    return export_report(report, out / "analysis", a.bins)


_RUNNERS = {"generate": _run_generate, "train-ae": _run_train_ae, "infer": _run_infer,
            "analyze": _run_analyze}


def _outputs_intact(entry: dict, out: Path) -> bool:
    for rel, digest in entry.get("outputs", {}).items():
        p = out / rel
        if not p.is_file() or sha256_file(p) != digest:
            return False
    return bool(entry.get("outputs"))


def cmd_pipeline(cfg: RunConfig, seed: int, out_dir: str | Path,
                 stages: tuple[str, ...] = STAGES) -> dict:
    """Run (or resume) the four stages and return the manifest.

    A stage is skipped when the manifest records the same stage key and all
    of its outputs are present with matching hashes, unless an earlier
    stage ran in this invocation.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    old = {}
    if manifest_path.is_file():
        try:
            old = {s["name"]: s for s in json.loads(manifest_path.read_text()).get("stages", [])}
        except (json.JSONDecodeError, KeyError, TypeError):
            log.warning("ignoring unreadable manifest %s", manifest_path)
    (out / "config.txt").write_text(cfg.to_text())
    manifest = {"config_hash": cfg.hash(), "seed": int(seed), "stages": []}
    upstream_ran = False
    for name in stages:
        key = _stage_key(cfg, seed, name)
        prev = old.get(name)
        if not upstream_ran and prev and prev.get("key") == key and _outputs_intact(prev, out):
            entry = dict(prev, status="skipped")
            log.info("stage %s: up to date", name)
        else:
            t0 = time.perf_counter()
            log.info("stage %s: running", name)
            try:
                files = _RUNNERS[name](cfg, seed, out)
            except ConfigError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
            entry = {
                "name": name,
                "key": key,
                "status": "ran",
                "seconds": round(time.perf_counter() - t0, 3),
                "outputs": {str(p.relative_to(out)): sha256_file(p) for p in files},
            }
            upstream_ran = True
        manifest["stages"].append(entry)
        tmp = manifest_path.with_name("manifest.json.tmp")
        tmp.write_text(json.dumps(manifest, indent=2) + "\n")
        tmp.replace(manifest_path)
    return manifest
