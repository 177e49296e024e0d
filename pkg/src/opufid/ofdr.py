"""Coherent-OFDR acquisition of the Rayleigh backscatter beat signal.

The photocurrent at sample time t_i is

    I(t_i) = e0**2 * sum_k sqrt(R_k) * cos(2*pi * sweep_rate * t_i * tau_k)

summed over every reflector inside the distance gate, with tau_k the round-trip
time of reflector k. White Gaussian noise is added on the photocurrent at a
requested SNR, measured against the noiseless trace power.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AcquisitionError, InvalidParameterError
from .fiber_model import C_LIGHT, GROUP_INDEX, roundtrip_time
from .textio import fmt_num

DEFAULT_SWEEP_TIME_S = 0.5
DEFAULT_N_SAMPLES = 4000
DEFAULT_RESOLUTION_M = 1e-3
# chosen so one DFT bin is exactly 1 mm of fiber at the default sweep time;
# with 4000 samples the unaliased range is 2 m, enough for a 0.5 m pigtail
# and for short multi-span test chains
DEFAULT_SWEEP_RATE = C_LIGHT / (2 * GROUP_INDEX * DEFAULT_SWEEP_TIME_S * DEFAULT_RESOLUTION_M)

_CHUNK = 512


@dataclass(frozen=True)
class Challenge:
    challenge_id: str = "C1"
    e0: float = 1.0
    sweep_rate_hz_per_s: float = DEFAULT_SWEEP_RATE
    sweep_time_s: float = DEFAULT_SWEEP_TIME_S
    n_samples: int = DEFAULT_N_SAMPLES
    window_start_m: float | None = None
    window_end_m: float | None = None

    def __post_init__(self):
        if not self.e0 > 0:
            raise InvalidParameterError("e0 must be > 0")
        if not self.sweep_rate_hz_per_s > 0 or not self.sweep_time_s > 0:
            raise InvalidParameterError("sweep rate and sweep time must be > 0")
        if int(self.n_samples) != self.n_samples or self.n_samples < 2:
            raise InvalidParameterError("n_samples must be an integer >= 2")
        gate = (self.window_start_m, self.window_end_m)
        if (gate[0] is None) != (gate[1] is None):
            raise InvalidParameterError("distance gate needs both start and end")
        if gate[0] is not None and not 0 <= gate[0] < gate[1]:
            raise InvalidParameterError("distance gate must satisfy 0 <= start < end")

    @property
    def has_gate(self):
        return self.window_start_m is not None

    @property
    def resolution_m(self):
        return C_LIGHT / (2 * self.sweep_rate_hz_per_s * GROUP_INDEX * self.sweep_time_s)

    @property
    def max_range_m(self):
        """Distance of the Nyquist bin."""
        return (self.n_samples // 2) * self.resolution_m

    def sample_times(self):
        return np.arange(self.n_samples) * (self.sweep_time_s / self.n_samples)

    def params(self):
        """Ordered parameter mapping, used by the database record format."""
        out = {
            "e0": self.e0,
            "sweep_rate_hz_per_s": self.sweep_rate_hz_per_s,
            "sweep_time_s": self.sweep_time_s,
            "n_samples": self.n_samples,
        }
        if self.has_gate:
            out["window_start_m"] = self.window_start_m
            out["window_end_m"] = self.window_end_m
        return out

    @classmethod
    def from_params(cls, challenge_id, params):
        kw = {}
        for key, value in params.items():
            if key == "n_samples":
                kw[key] = int(value)
            elif key in ("e0", "sweep_rate_hz_per_s", "sweep_time_s", "window_start_m", "window_end_m"):
                kw[key] = float(value)
            else:
                raise InvalidParameterError(f"unknown challenge parameter {key!r}")
        return cls(challenge_id=challenge_id, **kw)

    def with_id(self, challenge_id):
        return replace(self, challenge_id=challenge_id)


@dataclass(frozen=True, eq=False)
class RbpTrace:
    samples: np.ndarray = field(repr=False)
    sweep_time_s: float
    challenge_id: str
    source: str
    snr_db: float = math.inf

    def __len__(self):
        return len(self.samples)

    @property
    def sample_times_s(self):
        n = len(self.samples)
        return np.arange(n) * (self.sweep_time_s / n)


@dataclass(frozen=True, eq=False)
class QuantizedTrace:
    levels: np.ndarray = field(repr=False)
    bits_per_sample: int
    thresholds: tuple  # 1 bit: (median,); multi-bit: (lower edge, step)

    def dequantize(self):
        if self.bits_per_sample == 1:
            return self.levels.astype(float)
        lo, step = self.thresholds
        return lo + self.levels * step


def _gated_reflectors(target, challenge):
    pos, refl = target.reflectors()
    if challenge.has_gate:
        keep = (pos >= challenge.window_start_m) & (pos <= challenge.window_end_m)
        pos, refl = pos[keep], refl[keep]
    return pos, refl


def noiseless_samples(target, challenge):
    pos, refl = _gated_reflectors(target, challenge)
    t = challenge.sample_times()
    beat = challenge.sweep_rate_hz_per_s * roundtrip_time(pos)
    amp = np.sqrt(refl)
    out = np.zeros(len(t))
    for i in range(0, len(beat), _CHUNK):
        phase = np.outer(t, 2 * np.pi * beat[i:i + _CHUNK])
        out += np.cos(phase) @ amp[i:i + _CHUNK]
    return challenge.e0 ** 2 * out, len(pos)


def acquire(target, challenge, snr_db=math.inf, noise_seed=None):
    """Sampled photocurrent of ``target`` under ``challenge``.

    Deterministic in all arguments; ``noise_seed`` is only consumed when
    ``snr_db`` is finite.
    """
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise InvalidParameterError(f"snr_db must be finite or +inf, got {snr_db}")
    samples, n_refl = noiseless_samples(target, challenge)
    if math.isfinite(snr_db):
        power = float(np.mean(samples ** 2))
        if n_refl == 0 or power == 0.0:
            raise AcquisitionError("no reflector inside the gate; SNR is undefined for a zero-power signal")
        sigma = math.sqrt(power / 10 ** (snr_db / 10))
        rng = np.random.default_rng(noise_seed)
        samples = samples + rng.normal(0.0, sigma, len(samples))
    samples.setflags(write=False)
    return RbpTrace(samples, challenge.sweep_time_s, challenge.challenge_id, target.fiber_id, float(snr_db))


def median(values):
    """Midpoint median; ties with the threshold quantize to 1."""
    return float(np.median(np.asarray(values, dtype=float)))


def quantize(trace, bits_per_sample):
    if int(bits_per_sample) != bits_per_sample or not 1 <= bits_per_sample <= 16:
        raise InvalidParameterError("bits_per_sample must be an integer in [1, 16]")
    x = np.asarray(getattr(trace, "samples", trace), dtype=float)
    if bits_per_sample == 1:
        med = median(x)
        return QuantizedTrace((x >= med).astype(np.int64), 1, (med,))
    lo, hi = float(x.min()), float(x.max())
    top = 2 ** bits_per_sample - 1
    step = (hi - lo) / top
    if step == 0:
        levels = np.zeros(len(x), dtype=np.int64)
    else:
        levels = np.clip(np.rint((x - lo) / step), 0, top).astype(np.int64)
    return QuantizedTrace(levels, int(bits_per_sample), (lo, step))


def measured_snr_db(noisy, clean):
    noisy = np.asarray(getattr(noisy, "samples", noisy))
    clean = np.asarray(getattr(clean, "samples", clean))
    noise = noisy - clean
    return 10 * math.log10(np.mean(clean ** 2) / np.mean(noise ** 2))


def write_trace_csv(trace, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "time_s", "value"])
        for i, (t, v) in enumerate(zip(trace.sample_times_s, trace.samples)):
            w.writerow([i, fmt_num(t), fmt_num(v)])


def write_quantized_csv(qtrace, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "level"])
        for i, level in enumerate(qtrace.levels):
            w.writerow([i, int(level)])
