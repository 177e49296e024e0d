"""Hamming-distance statistics and the binomial accept/reject decision model.

A probe is accepted when HD <= t with t = gamma*M_V + (1-gamma)*M_U. Error
probabilities are binomial tails with success probability M/N, evaluated in the
log domain so values far below 1e-300 stay representable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln, xlog1py, xlogy

from .errors import InvalidParameterError
from .textio import fmt_num

LN10 = math.log(10.0)
LN2 = math.log(2.0)
CONTEXTS = ("inner", "intra", "inter")


def _bit_array(x):
    if isinstance(x, str):
        if set(x) - {"0", "1"}:
            raise InvalidParameterError(f"not a bit string: {x!r}")
        return np.frombuffer(x.encode(), dtype=np.uint8) - ord("0")
    if hasattr(x, "bits") and hasattr(x, "flat"):
        return x.flat()
    return np.asarray(x).ravel()


def hamming(a, b):
    a, b = _bit_array(a), _bit_array(b)
    if a.shape != b.shape:
        raise InvalidParameterError(f"length mismatch: {a.size} vs {b.size}")
    return int(np.count_nonzero(a != b))


@dataclass(frozen=True, eq=False)
class HdExperiment:
    values: np.ndarray
    context: str
    n_bits: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int64)
        if self.context not in CONTEXTS:
            raise InvalidParameterError(f"unknown context {self.context!r}")
        if v.size and (v.min() < 0 or v.max() > self.n_bits):
            raise InvalidParameterError("HD values must lie in [0, n_bits]")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


def inner_hd(signature):
    bits = np.asarray(getattr(signature, "bits", signature))
    rows = bits.shape[0]
    if bits.ndim != 2 or rows < 2:
        raise InvalidParameterError("inner HD needs a matrix with at least two rows")
    values = [int(np.count_nonzero(bits[i] != bits[j])) for i, j in combinations(range(rows), 2)]
    return HdExperiment(np.array(values), "inner", bits.shape[1])


def intra_hd(reference, probes):
    """HD of each repeated measurement against the enrolled reference."""
    values = [hamming(reference, p) for p in probes]
    return HdExperiment(np.array(values), "intra", _bit_array(reference).size)


def inter_hd(probe, references):
    """HD of one (unenrolled) ID against every stored ID."""
    values = [hamming(probe, r) for r in references]
    return HdExperiment(np.array(values), "inter", _bit_array(probe).size)


@dataclass(frozen=True)
class ThresholdPolicy:
    gamma: float
    m_u: float
    m_v: float
    n_bits: int

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise InvalidParameterError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0 <= self.m_u <= self.m_v <= self.n_bits:
            raise InvalidParameterError(
                f"need 0 <= M_U <= M_V <= N, got M_U={self.m_u}, M_V={self.m_v}, N={self.n_bits}"
            )


def threshold(policy):
    return policy.gamma * policy.m_v + (1 - policy.gamma) * policy.m_u


def accepts(hd, t):
    return hd <= t


class TailProbability(NamedTuple):
    p: float
    log10: float


def _log_pmf(k, n, p):
    k = np.asarray(k, dtype=float)
    log_c = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
    return log_c + xlogy(k, p) + xlog1py(n - k, -p)


def _log_sum(log_terms):
    log_terms = np.asarray(log_terms, dtype=float)
    if log_terms.size == 0:
        return -math.inf
    m = float(log_terms.max())
    if m == -math.inf:
        return -math.inf
    return m + math.log(math.fsum(np.exp(log_terms - m)))


def log_binom_range(lo, hi, n, p):
    """Natural log of P(lo <= X <= hi) for X ~ Binomial(n, p)."""
    n = int(n)
    lo, hi = max(int(lo), 0), min(int(hi), n)
    if hi < lo:
        return -math.inf
    if lo == 0 and hi == n:
        return 0.0
    direct = _log_sum(_log_pmf(np.arange(lo, hi + 1), n, p))
    if lo > 0 and hi < n or direct < -LN2:
        return direct
    # a one-sided tail holding most of the mass: 1 - (other tail) keeps the
    # two tails summing to exactly 1 despite log-gamma rounding
    other = np.arange(hi + 1, n + 1) if lo == 0 else np.arange(0, lo)
    return math.log1p(-min(math.exp(_log_sum(_log_pmf(other, n, p))), 1.0))


def _tail(ln):
    return TailProbability(math.exp(ln), ln / LN10 if ln > -math.inf else -math.inf)


def _check_mean(m, n_bits, name):
    if not 0 <= m <= n_bits:
        raise InvalidParameterError(f"{name} must lie in [0, {n_bits}], got {m}")
    if n_bits < 1 or int(n_bits) != n_bits:
        raise InvalidParameterError("n_bits must be a positive integer")


def p_false_positive(m_v, n_bits, t):
    """P(HD <= t) for an impostor whose HD ~ Binomial(N, M_V/N)."""
    _check_mean(m_v, n_bits, "M_V")
    if t < 0:
        raise InvalidParameterError("threshold must be >= 0")
    return _tail(log_binom_range(0, math.floor(t), n_bits, m_v / n_bits))


def p_false_negative(m_u, n_bits, t):
    """P(HD > t) for the genuine user whose HD ~ Binomial(N, M_U/N)."""
    _check_mean(m_u, n_bits, "M_U")
    if t < 0:
        raise InvalidParameterError("threshold must be >= 0")
    return _tail(log_binom_range(math.floor(t) + 1, n_bits, n_bits, m_u / n_bits))


@dataclass(frozen=True)
class ErrorEstimate:
    threshold: float
    p_false_positive: float
    p_false_negative: float
    log10_fp: float
    log10_fn: float
    gamma: float | None = None
    snr_label: str | None = None


def error_estimate(m_u, m_v, n_bits, t, gamma=None, snr_label=None):
    fp = p_false_positive(m_v, n_bits, t)
    fn = p_false_negative(m_u, n_bits, t)
    return ErrorEstimate(t, fp.p, fn.p, fp.log10, fn.log10, gamma, snr_label)


def error_curve(m_u, m_v, n_bits, gamma_grid, snr_label=None):
    out = []
    for g in gamma_grid:
        t = threshold(ThresholdPolicy(float(g), m_u, m_v, n_bits))
        out.append(error_estimate(m_u, m_v, n_bits, t, float(g), snr_label))
    return out


@dataclass(frozen=True)
class PathEstimate:
    per_subsystem: tuple
    p_total: float


def path_probability(p_list):
    """Probability that every sub-system on a path is identified, assuming independence."""
    items = []
    for i, entry in enumerate(p_list):
        label, p = entry if isinstance(entry, tuple) else (f"ID{i + 1}", entry)
        if not 0 <= p <= 1:
            raise InvalidParameterError(f"p for {label} must lie in [0, 1], got {p}")
        items.append((label, float(p)))
    return PathEstimate(tuple(items), math.prod(p for _, p in items))


class HdStatistics(NamedTuple):
    mean: float
    variance: float
    bins: np.ndarray
    counts: np.ndarray


def hd_statistics(experiment):
    values = np.asarray(getattr(experiment, "values", experiment), dtype=np.int64)
    if values.size == 0:
        raise InvalidParameterError("no HD values")
    var = float(values.var(ddof=1)) if values.size > 1 else 0.0
    counts = np.bincount(values)
    return HdStatistics(float(values.mean()), var, np.arange(len(counts)), counts)


def histogram_csv(stats):
    lines = ["bin,count"]
    lines += [f"{b},{c}" for b, c in zip(stats.bins, stats.counts) if c]
    return "\n".join(lines) + "\n"


def curve_csv(estimates):
    lines = ["gamma,log10_fp,log10_fn"]
    lines += [f"{fmt_num(e.gamma)},{fmt_num(e.log10_fp)},{fmt_num(e.log10_fn)}" for e in estimates]
    return "\n".join(lines) + "\n"
