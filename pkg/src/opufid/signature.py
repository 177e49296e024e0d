"""Binary IDs distilled from backscatter traces.

Two schemes:

* ``direct``: a 1-bit quantized pigtail trace with key bits appended, reshaped
  into a square matrix (4000 + 96 bits -> 64x64 by default).
* ``intersection``: crossing points of normalized profile windows taken on
  different spans, two-level quantized around their median amplitude.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateSegmentError,
    EmptyOverlapError,
    InsufficientEntropyError,
    InvalidParameterError,
    OutOfRangeError,
    ParseError,
)
from .ofdr import median, quantize
from .textio import atomic_write, bits_to_hex, dump_kv, hex_to_bits, parse_kv

SIG_HEADER = "opufid-sig v1"
SCHEMES = ("direct", "intersection")
MIN_INTERSECTIONS = 4
_GRID_TOL = 1e-12


def _as_bits(bits):
    a = np.asarray(bits)
    if a.size and not np.all((a == 0) | (a == 1)):
        raise InvalidParameterError("bits must be 0/1")
    return a.astype(np.uint8)


@dataclass(frozen=True, eq=False)
class DigitalSignature:
    bits: np.ndarray = field(repr=False)
    scheme: str = "direct"
    key_len: int = 0
    provenance: str = ""

    def __post_init__(self):
        b = _as_bits(self.bits)
        if b.ndim != 2 or 0 in b.shape:
            raise InvalidParameterError(f"signature bits must be a nonempty 2-D matrix, got shape {b.shape}")
        if self.scheme not in SCHEMES:
            raise InvalidParameterError(f"unknown scheme {self.scheme!r}")
        if not 0 <= self.key_len <= b.size:
            raise InvalidParameterError("key_len exceeds the matrix size")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def shape(self):
        return self.bits.shape

    @property
    def rows(self):
        return self.bits.shape[0]

    @property
    def cols(self):
        return self.bits.shape[1]

    @property
    def n_bits(self):
        return self.bits.size

    def flat(self):
        return self.bits.ravel()

    @property
    def key_bits(self):
        return self.flat()[self.n_bits - self.key_len:] if self.key_len else None

    @property
    def data_bits(self):
        return self.flat()[:self.n_bits - self.key_len]

    def same_bits(self, other):
        return self.shape == other.shape and np.array_equal(self.bits, other.bits)

    def __eq__(self, other):
        if not isinstance(other, DigitalSignature):
            return NotImplemented
        return (self.same_bits(other) and self.scheme == other.scheme
                and self.key_len == other.key_len and self.provenance == other.provenance)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Segment:
    positions_m: np.ndarray
    amplitudes: np.ndarray
    label: str = ""

    def __post_init__(self):
        pos = np.asarray(self.positions_m, dtype=float)
        amp = np.asarray(self.amplitudes, dtype=float)
        if pos.shape != amp.shape or pos.ndim != 1:
            raise InvalidParameterError("positions and amplitudes must be 1-D and equal length")
        if len(pos) > 1 and np.any(np.diff(pos) <= 0):
            raise InvalidParameterError("segment positions must be strictly ascending")
        object.__setattr__(self, "positions_m", pos)
        object.__setattr__(self, "amplitudes", amp)

    def __len__(self):
        return len(self.positions_m)


@dataclass(frozen=True, eq=False)
class IntersectionSet:
    positions_m: np.ndarray
    amplitudes: np.ndarray
    parents: tuple = ()
    label: str = ""

    def __len__(self):
        return len(self.positions_m)

    def as_segment(self, label=None):
        return Segment(self.positions_m, self.amplitudes, label or self.label)

    def head(self, n, label=None):
        return IntersectionSet(self.positions_m[:n], self.amplitudes[:n], self.parents, label or self.label)


def _square_side(total):
    r = math.isqrt(total)
    return r if r * r == total else None


def make_signature_direct(trace, key_bits=None, provenance=None):
    data = quantize(trace, 1).levels.astype(np.uint8)
    key = _as_bits(key_bits if key_bits is not None else []).ravel()
    flat = np.concatenate([data, key])
    side = _square_side(len(flat))
    if side is None:
        raise InvalidParameterError(
            f"{len(data)} data bits + {len(key)} key bits = {len(flat)} is not a perfect square"
        )
    if provenance is None:
        provenance = f"{getattr(trace, 'challenge_id', '')}:{getattr(trace, 'source', '')}"
    return DigitalSignature(flat.reshape(side, side), "direct", len(key), provenance)


def select_window(profile, start_m, length_m, label=""):
    axis = profile.distance_axis_m
    step = profile.resolution_m
    end_m = start_m + length_m
    if length_m < 0 or start_m < axis[0] - 1e-9 * step or end_m > axis[-1] + 1e-9 * step:
        raise OutOfRangeError(
            f"window [{start_m:g}, {end_m:g}] m outside profile [{axis[0]:g}, {axis[-1]:g}] m"
        )
    i0 = max(int(math.ceil((start_m - axis[0]) / step - 1e-9)), 0)
    i1 = min(int(math.floor((end_m - axis[0]) / step + 1e-9)), len(axis) - 1)
    if i1 < i0:
        raise OutOfRangeError(f"window [{start_m:g}, {end_m:g}] m contains no grid point")
    amp = np.asarray(profile.magnitude[i0:i1 + 1], dtype=float)
    peak = amp.max()
    if peak <= 0:
        raise DegenerateSegmentError(f"window [{start_m:g}, {end_m:g}] m is all zero")
    return Segment(axis[i0:i1 + 1].copy(), amp / peak, label)


def _merge_grid(xa, xb, hi):
    grid = np.concatenate([xa[xa <= hi], xb[xb <= hi], [hi]])
    grid = np.unique(grid)
    tol = _GRID_TOL * max(hi, 1.0)
    keep = np.concatenate([[True], np.diff(grid) > tol])
    grid = grid[keep]
    if grid[-1] < hi:
        grid[-1] = hi
    return grid


def intersect(a, b, label=""):
    """Crossings of two piecewise-linear segments after aligning both to start at 0.

    A sign change of a-b inside a grid interval yields one linearly
    interpolated crossing; an isolated exact zero counts once when the signs on
    either side differ; coincidence over an interval yields nothing.
    """
    if len(a) == 0 or len(b) == 0:
        raise InvalidParameterError("cannot intersect an empty segment")
    xa = a.positions_m - a.positions_m[0]
    xb = b.positions_m - b.positions_m[0]
    hi = min(xa[-1], xb[-1])
    if not hi > 0:
        raise EmptyOverlapError(f"segments {a.label or '?'} and {b.label or '?'} do not overlap")
    grid = _merge_grid(xa, xb, hi)
    va = np.interp(grid, xa, a.amplitudes)
    vb = np.interp(grid, xb, b.amplitudes)
    d = va - vb
    sign = np.sign(d)

    pos, amp = [], []
    n = len(grid)
    i = 0
    prev_sign = 0  # sign of the last nonzero sample before i
    while i < n:
        if sign[i] == 0:
            j = i
            while j + 1 < n and sign[j + 1] == 0:
                j += 1
            nxt = sign[j + 1] if j + 1 < n else 0
            if i == j and prev_sign != 0 and nxt != 0 and prev_sign != nxt:
                pos.append(grid[i])
                amp.append(va[i])
            i = j + 1
            continue
        if i + 1 < n and sign[i] * sign[i + 1] < 0:
            frac = d[i] / (d[i] - d[i + 1])
            pos.append(grid[i] + frac * (grid[i + 1] - grid[i]))
            amp.append(va[i] + frac * (va[i + 1] - va[i]))
        prev_sign = sign[i]
        i += 1
    parents = (a.label, b.label)
    return IntersectionSet(np.array(pos, dtype=float), np.array(amp, dtype=float), parents, label)


def quantize_intersections(points, key_bits=None, provenance=""):
    n = len(points)
    if n < MIN_INTERSECTIONS:
        raise InsufficientEntropyError(f"{n} intersection points, need at least {MIN_INTERSECTIONS}")
    amp = np.asarray(points.amplitudes, dtype=float)
    data = (amp >= median(amp)).astype(np.uint8)
    key = _as_bits(key_bits if key_bits is not None else []).ravel()
    flat = np.concatenate([data, key])
    r = math.isqrt(len(flat))
    kept_key = max(0, min(len(key), r * r - n))
    prov = f"{provenance};r={r}" if provenance else f"r={r}"
    return DigitalSignature(flat[:r * r].reshape(r, r), "intersection", kept_key, prov)


def cascade_intersections_I(s1, s2, s3):
    j1 = intersect(s1, s2, label="J1")
    if len(j1) == 0:
        raise InsufficientEntropyError("S1 and S2 do not cross; J1 is empty")
    return intersect(j1.as_segment("J1"), s3, label="J2")


def half_and_half(j1, j2):
    """Default subset rule: first ceil(|J1|/2) of J1, then first floor(|J2|/2) of J2."""
    a = j1.head(math.ceil(len(j1) / 2))
    b = j2.head(len(j2) // 2)
    return IntersectionSet(
        np.concatenate([a.positions_m, b.positions_m]),
        np.concatenate([a.amplitudes, b.amplitudes]),
        ("J1", "J2"),
        "J3",
    )


def cascade_intersections_II(s1, s2, s3, subset_rule=half_and_half):
    j1 = intersect(s1, s2, label="J1")
    j2 = intersect(s1, s3, label="J2")
    if len(j1) == 0 and len(j2) == 0:
        raise InsufficientEntropyError("both J1 and J2 are empty")
    return subset_rule(j1, j2)


def signature_to_text(sig):
    return dump_kv(SIG_HEADER, [
        ("scheme", sig.scheme),
        ("rows", sig.rows),
        ("cols", sig.cols),
        ("key_len", sig.key_len),
        ("provenance", sig.provenance),
        ("bits", bits_to_hex(sig.flat())),
    ])


def signature_from_text(text):
    f = parse_kv(text, SIG_HEADER)
    try:
        rows, cols, key_len = int(f["rows"]), int(f["cols"]), int(f["key_len"])
        bits = hex_to_bits(f["bits"], rows * cols).reshape(rows, cols)
        return DigitalSignature(bits, f["scheme"], key_len, f.get("provenance", ""))
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]}") from None
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def save_signature(sig, path):
    atomic_write(path, signature_to_text(sig))


def load_signature(path):
    with open(path, encoding="utf-8") as fh:
        return signature_from_text(fh.read())


def pbm_text(sig):
    body = "\n".join(" ".join(str(int(v)) for v in row) for row in sig.bits)
    return f"P1\n{sig.cols} {sig.rows}\n{body}\n"


def export_qr(sig, path):
    """Plain (P1) portable bitmap of the ID matrix; 1 renders black."""
    atomic_write(path, pbm_text(sig))


def import_qr(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    tokens = []
    for line in text.splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P1":
        raise ParseError("not a plain PBM (P1) file", line=1)
    try:
        cols, rows = int(tokens[1]), int(tokens[2])
    except (IndexError, ValueError):
        raise ParseError("missing PBM dimensions", line=2) from None
    # P1 pixels may also be packed without separators
    pixels = "".join(tokens[3:])
    if len(pixels) != rows * cols or set(pixels) - {"0", "1"}:
        raise ParseError(f"expected {rows * cols} pixels of 0/1")
    return np.frombuffer(pixels.encode(), dtype=np.uint8).reshape(rows, cols) - ord("0")
