"""Virtual accelerated-neuromorphic AdEx device.

A single adaptive exponential integrate-and-fire neuron driven by a step
current.  Four analog quantities are configured through 10-bit digital codes;
the membrane is read out through a 10-bit ADC and resampled to the 1024-point
normalized form consumed by the autoencoder.

All times are biological milliseconds, potentials mV, currents pA,
conductances nS and capacitances pF (so that nS * mV = pA and pA / pF = mV/ms).
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .errors import ConfigError, IntegrationError, RangeError, ShapeError, SimulationError

CODE_MAX = 1022
ADC_MAX = 1023
RAW_LENGTH = 10000
TRACE_LENGTH = 1024
PARAM_NAMES = ("a_code", "b_code", "g_tauw_code", "v_r_code")
EXP_ARG_MAX = 20.0
# per-step current noise std equals current_sigma at this step width
NOISE_REFERENCE_DT = 0.05


@dataclass(frozen=True)
class DigitalParams:
    """The four inferable 10-bit parameter codes."""

    a_code: int
    b_code: int
    g_tauw_code: int
    v_r_code: int

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = getattr(self, name)
            if int(value) != value or not 0 <= value <= CODE_MAX:
                raise RangeError(f"{name}={value} outside [0, {CODE_MAX}]")
            object.__setattr__(self, name, int(value))

    def as_array(self) -> np.ndarray:
        return np.array([self.a_code, self.b_code, self.g_tauw_code, self.v_r_code], dtype=np.int64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "DigitalParams":
        if len(values) != 4:
            raise ShapeError(f"expected 4 codes, got {len(values)}")
        return cls(*(int(v) for v in values))


@dataclass(frozen=True)
class AdExPhysical:
    C_m: float
    g_L: float
    V_L: float
    Delta_T: float
    V_T: float
    V_th: float
    V_r: float
    tau_ref: float
    a: float
    b: float
    C_w: float
    g_tauw: float

    def __post_init__(self):
        if not (self.C_m > 0 and self.g_L > 0 and self.Delta_T > 0):
            raise ConfigError("C_m, g_L and Delta_T must be positive")
        if self.tau_ref < 0:
            raise ConfigError("tau_ref must be non-negative")
        if not (self.C_w > 0 and self.g_tauw > 0):
            raise ConfigError("C_w and g_tauw must be positive")
        if not self.V_r < self.V_th:
            raise ConfigError(f"V_r={self.V_r} must lie below V_th={self.V_th}")

    @property
    def tau_w(self) -> float:
        return self.C_w / self.g_tauw


@dataclass(frozen=True)
class StepStimulus:
    amplitude: float
    onset: float = 0.0
    duration: float = math.inf

    def __post_init__(self):
        if not math.isfinite(self.amplitude):
            raise ConfigError("stimulus amplitude must be finite")
        if self.onset < 0 or not self.duration > 0:
            raise ConfigError("stimulus needs onset >= 0 and duration > 0")

    def current(self, times: np.ndarray) -> np.ndarray:
        on = (times >= self.onset) & (times < self.onset + self.duration)
        return np.where(on, self.amplitude, 0.0)


@dataclass(frozen=True)
class NoiseModel:
    """Trial noise: white current noise plus per-trial multiplicative jitter.

    ``current_sigma`` is the per-step standard deviation (pA) at a step width
    of 0.05 ms; other step widths are rescaled by sqrt(0.05 / dt) so the
    membrane diffusion does not depend on dt.  ``param_jitter_rel`` scales
    g_L, a, b and g_tauw by independent factors ``1 + rel * N(0, 1)``.
    """

    current_sigma: float = 0.0
    param_jitter_rel: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.current_sigma < 0 or self.param_jitter_rel < 0:
            raise ConfigError("noise magnitudes must be non-negative")


@dataclass(frozen=True)
class RawTrace:
    values: np.ndarray
    sample_period: float

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.values)) * self.sample_period


@dataclass
class IntegrationResult:
    trace: RawTrace
    spike_times: np.ndarray
    w_trace: np.ndarray
    w_before_spike: np.ndarray
    w_after_spike: np.ndarray


# key -> (default, unit/description)
_DEVICE_KEYS: dict[str, tuple[float, str]] = {
    "C_m": (200.0, "membrane capacitance [pF]"),
    "g_L": (10.0, "leak conductance [nS]"),
    "V_L": (-70.0, "leak potential [mV]"),
    "Delta_T": (2.0, "threshold slope factor [mV]"),
    "V_T": (-50.0, "effective threshold potential [mV]"),
    "V_th": (-40.0, "spike threshold / reset trigger [mV]"),
    "tau_ref": (2.0, "refractory period [ms]"),
    "C_w": (2000.0, "adaptation capacitance [pF]"),
    "stim_amplitude": (500.0, "step current amplitude [pA]"),
    "stim_onset": (0.0, "step current onset [ms]"),
    "stim_duration": (1000.0, "step current duration [ms]"),
    "a_min": (0.0, "a at code 0 [nS]"),
    "a_max": (10.0, "a at code 1022 [nS]"),
    "b_min": (0.0, "b at code 0 [pA]"),
    "b_max": (200.0, "b at code 1022 [pA]"),
    "g_tauw_min": (6.6, "g_tauw at code 0 [nS]"),
    "g_tauw_max": (200.0, "g_tauw at code 1022 [nS]"),
    "v_r_min": (-70.0, "V_r at code 0 [mV]"),
    "v_r_max": (-45.0, "V_r at code 1022 [mV]"),
    "adc_v_min": (-80.0, "ADC code 0 [mV]"),
    "adc_v_max": (-30.0, "ADC code 1023 [mV]"),
    "current_sigma": (10.0, "current noise std per 0.05 ms step [pA]"),
    "param_jitter_rel": (0.01, "relative per-trial jitter of g_L, a, b, g_tauw [1]"),
    "dt": (0.05, "integration step [ms]"),
    "duration": (1000.0, "recording window from stimulus onset [ms]"),
}


@dataclass(frozen=True)
class DeviceConfig:
    """Everything the virtual device needs apart from codes and seed."""

    C_m: float = 200.0
    g_L: float = 10.0
    V_L: float = -70.0
    Delta_T: float = 2.0
    V_T: float = -50.0
    V_th: float = -40.0
    tau_ref: float = 2.0
    C_w: float = 2000.0
    stim_amplitude: float = 500.0
    stim_onset: float = 0.0
    stim_duration: float = 1000.0
    a_min: float = 0.0
    a_max: float = 10.0
    b_min: float = 0.0
    b_max: float = 200.0
    g_tauw_min: float = 6.6
    g_tauw_max: float = 200.0
    v_r_min: float = -70.0
    v_r_max: float = -45.0
    adc_v_min: float = -80.0
    adc_v_max: float = -30.0
    current_sigma: float = 10.0
    param_jitter_rel: float = 0.01
    dt: float = 0.05
    duration: float = 1000.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigError(f"device key {f.name} must be a finite number")
            object.__setattr__(self, f.name, float(value))
        for lo, hi in (("a_min", "a_max"), ("b_min", "b_max"), ("g_tauw_min", "g_tauw_max"),
                       ("v_r_min", "v_r_max"), ("adc_v_min", "adc_v_max")):
            if not getattr(self, lo) < getattr(self, hi):
                raise ConfigError(f"{lo} must be smaller than {hi}")
        if self.g_tauw_min <= 0:
            raise ConfigError("g_tauw_min must be positive")
        if self.dt <= 0 or self.duration <= 0:
            raise ConfigError("dt and duration must be positive")
        _steps_per_sample(self.dt, self.sample_period)

    @property
    def sample_period(self) -> float:
        return self.duration / RAW_LENGTH

    @property
    def range_table(self) -> dict[str, tuple[float, float]]:
        return {
            "a_code": (self.a_min, self.a_max),
            "b_code": (self.b_min, self.b_max),
            "g_tauw_code": (self.g_tauw_min, self.g_tauw_max),
            "v_r_code": (self.v_r_min, self.v_r_max),
        }

    def noise(self, seed: int) -> NoiseModel:
        return NoiseModel(self.current_sigma, self.param_jitter_rel, seed)

    def stimulus(self) -> StepStimulus:
        return StepStimulus(self.stim_amplitude, self.stim_onset, self.stim_duration)

    def replace(self, **changes) -> "DeviceConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for key, (_, doc) in _DEVICE_KEYS.items():
            lines.append(f"{key} = {getattr(self, key)!r}  # {doc}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        canonical = "\n".join(f"{k}={getattr(self, k)!r}" for k in _DEVICE_KEYS)
        return hashlib.sha256(canonical.encode()).hexdigest()

    @classmethod
    def from_mapping(cls, values: dict[str, str | float]) -> "DeviceConfig":
        unknown = sorted(set(values) - set(_DEVICE_KEYS))
        if unknown:
            raise ConfigError(f"unknown device keys: {', '.join(unknown)}")
        parsed = {}
        for key, raw in values.items():
            try:
                parsed[key] = float(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"device key {key}: cannot parse {raw!r} as a number") from None
        return cls(**parsed)

    @classmethod
    def from_file(cls, path: str | Path) -> "DeviceConfig":
        return cls.from_mapping(parse_key_value_text(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def parse_key_value_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        out[key] = value
    return out


def device_keys() -> dict[str, str]:
    """Documented device-config keys and their units."""
    return {k: doc for k, (_, doc) in _DEVICE_KEYS.items()}


def _steps_per_sample(dt: float, sample_period: float) -> int:
    ratio = sample_period / dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9 * max(1.0, ratio):
        raise ConfigError(f"dt={dt} does not divide the sample period {sample_period}")
    return stride


def _check_codes(codes) -> np.ndarray:
    if isinstance(codes, DigitalParams):
        return codes.as_array().astype(np.float64)
    arr = np.asarray(codes, dtype=np.float64)
    if arr.shape != (4,):
        raise ShapeError(f"expected 4 codes, got shape {arr.shape}")
    if np.any(arr < 0) or np.any(arr > CODE_MAX) or np.any(arr != np.round(arr)):
        raise RangeError(f"codes {arr.tolist()} outside integer range [0, {CODE_MAX}]")
    return arr


def map_digital_to_physical(codes: DigitalParams | Sequence[int], config: DeviceConfig) -> AdExPhysical:
    """Linear map from codes to analog values: ``min + code / 1022 * (max - min)``."""
    c = _check_codes(codes) / CODE_MAX
    table = config.range_table
    vals = [lo + ci * (hi - lo) for ci, (lo, hi) in zip(c, table.values())]
    a, b, g_tauw, v_r = vals
    return AdExPhysical(
        C_m=config.C_m, g_L=config.g_L, V_L=config.V_L, Delta_T=config.Delta_T,
        V_T=config.V_T, V_th=config.V_th, V_r=v_r, tau_ref=config.tau_ref,
        a=a, b=b, C_w=config.C_w, g_tauw=g_tauw,
    )


@numba.njit(cache=True)
def _adex_kernel(C_m, g_L, V_L, Delta_T, V_T, V_th, V_r, n_ref, a, b, tau_w,
                 current, dt, stride, trace, w_trace, spike_steps, w_pre, w_post):
    n_steps = current.shape[0]
    V = V_L
    w = 0.0
    refr = 0
    n_spikes = 0
    for n in range(n_steps):
        if n % stride == 0:
            trace[n // stride] = V
            w_trace[n // stride] = w
        if refr > 0:
            V_new = V_r
            w_new = w + dt / tau_w * (a * (V_r - V_L) - w)
            refr -= 1
        else:
            arg = (V - V_T) / Delta_T
            if arg > 20.0:
                arg = 20.0
            dV = (g_L * (V_L - V) + g_L * Delta_T * np.exp(arg) + current[n] - w) / C_m
            w_new = w + dt / tau_w * (a * (V - V_L) - w)
            V_new = V + dt * dV
            if not (np.isfinite(V_new) and np.isfinite(w_new)):
                return -(n + 1)
            if V_new >= V_th:
                spike_steps[n_spikes] = n + 1
                w_pre[n_spikes] = w_new
                w_new = w_new + b
                w_post[n_spikes] = w_new
                n_spikes += 1
                V_new = V_r
                refr = n_ref
        if not (np.isfinite(V_new) and np.isfinite(w_new)):
            return -(n + 1)
        V = V_new
        w = w_new
    return n_spikes


def _jittered(phys: AdExPhysical, rng: np.random.Generator, rel: float) -> AdExPhysical:
    f = 1.0 + rel * rng.standard_normal(4)
    return dataclasses.replace(
        phys, g_L=phys.g_L * abs(f[0]), a=phys.a * abs(f[1]), b=phys.b * abs(f[2]),
        g_tauw=phys.g_tauw * abs(f[3]),
    )


def integrate(phys: AdExPhysical, stim: StepStimulus, duration: float, dt: float,
              noise: NoiseModel | None = None, n_samples: int = RAW_LENGTH) -> IntegrationResult:
    """Forward-Euler integration of the AdEx equations without synaptic input.

    The state starts at ``(V_L, 0)``.  A spike is registered at the first step
    where ``V_m >= V_th``; the membrane is then clamped to ``V_r`` for
    ``tau_ref`` while ``w`` keeps relaxing.  The exponential argument is
    clamped to 20.  ``n_samples`` samples are taken every ``duration/n_samples``.
    """
    noise = noise or NoiseModel()
    sample_period = duration / n_samples
    stride = _steps_per_sample(dt, sample_period)
    n_steps = stride * n_samples
    rng = np.random.default_rng(noise.seed)
    # jitter is drawn even at zero magnitude to keep the noise stream aligned
    phys = _jittered(phys, rng, noise.param_jitter_rel)
    current = stim.current(np.arange(n_steps) * dt)
    if noise.current_sigma > 0:
        sigma = noise.current_sigma * math.sqrt(NOISE_REFERENCE_DT / dt)
        current = current + sigma * rng.standard_normal(n_steps)
    n_ref = int(round(phys.tau_ref / dt))
    trace = np.empty(n_samples)
    w_trace = np.empty(n_samples)
    max_spikes = n_steps // (n_ref + 1) + 1
    spike_steps = np.empty(max_spikes, dtype=np.int64)
    w_pre = np.empty(max_spikes)
    w_post = np.empty(max_spikes)
    n = _adex_kernel(phys.C_m, phys.g_L, phys.V_L, phys.Delta_T, phys.V_T, phys.V_th, phys.V_r,
                     n_ref, phys.a, phys.b, phys.tau_w, current, dt, stride,
                     trace, w_trace, spike_steps, w_pre, w_post)
    if n < 0:
        raise IntegrationError(-n - 1)
    return IntegrationResult(
        trace=RawTrace(trace, sample_period),
        spike_times=spike_steps[:n] * dt,
        w_trace=w_trace,
        w_before_spike=w_pre[:n].copy(),
        w_after_spike=w_post[:n].copy(),
    )


def adc_quantize(raw: RawTrace | np.ndarray, adc_range: tuple[float, float]) -> np.ndarray:
    """10-bit quantizer, round-half-to-even, clamped to [0, 1023]."""
    v_min, v_max = adc_range
    if not v_min < v_max:
        raise ConfigError("ADC range needs V_min < V_max")
    values = raw.values if isinstance(raw, RawTrace) else np.asarray(raw, dtype=np.float64)
    codes = np.rint(ADC_MAX * (values - v_min) / (v_max - v_min))
    return np.clip(codes, 0, ADC_MAX).astype(np.uint16)


_QUERY = np.linspace(0.0, RAW_LENGTH - 1, TRACE_LENGTH)
_GRID = np.arange(RAW_LENGTH, dtype=np.float64)


def preprocess(digitized: np.ndarray) -> np.ndarray:
    """Resample a 10000-sample ADC trace to 1024 points and scale to [0, 1]."""
    digitized = np.asarray(digitized)
    if digitized.shape != (RAW_LENGTH,):
        raise ShapeError(f"expected a trace of length {RAW_LENGTH}, got shape {digitized.shape}")
    resampled = np.interp(_QUERY, _GRID, digitized.astype(np.float64))
    return (resampled / ADC_MAX).astype(np.float32)


@dataclass
class Experiment:
    """Full record of one device run."""

    codes: DigitalParams
    physical: AdExPhysical
    raw: IntegrationResult
    digitized: np.ndarray
    normalized: np.ndarray = field(repr=False)


def run_experiment_detailed(codes, config: DeviceConfig, seed: int) -> Experiment:
    if not isinstance(codes, DigitalParams):
        codes = DigitalParams.from_array(_check_codes(codes))
    phys = map_digital_to_physical(codes, config)
    # record window starts at stimulus onset
    stim = StepStimulus(config.stim_amplitude, 0.0, config.stim_duration)
    result = integrate(phys, stim, config.duration, config.dt, config.noise(seed))
    dig = adc_quantize(result.trace, (config.adc_v_min, config.adc_v_max))
    return Experiment(codes, phys, result, dig, preprocess(dig))


def run_experiment(codes, config: DeviceConfig, seed: int) -> np.ndarray:
    """Simulate one trial and return its 1024-point normalized trace (float32)."""
    return run_experiment_detailed(codes, config, seed).normalized


def simulate_batch(codes: np.ndarray, config: DeviceConfig, seeds: Sequence[int]) -> np.ndarray:
    """Run ``run_experiment`` row by row; failures name the offending row."""
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[1] != 4 or len(seeds) != len(codes):
        raise ShapeError("codes must be (N, 4) with one seed per row")
    out = np.empty((len(codes), TRACE_LENGTH), dtype=np.float32)
    for i, (row, seed) in enumerate(zip(codes, seeds)):
        try:
            out[i] = run_experiment(row, config, int(seed))
        except (IntegrationError, RangeError, ShapeError) as exc:
            raise SimulationError(i, exc) from exc
    return out


def trial_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Counter-based split: the seed sequence for row ``index`` of a run.

    Depends only on ``(master_seed, index)``, so rows can be generated in any
    order or in parallel.
    """
    return np.random.SeedSequence([int(master_seed), int(index)])
