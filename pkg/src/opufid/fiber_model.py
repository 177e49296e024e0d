"""Fibers as random sets of discrete Rayleigh reflectors, plus connector reflections.

A fiber is fully determined by ``(seed, length_m, density_per_m)``: the scatter
sites are regenerated from those on demand and never stored on disk.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, ParseError
from .textio import dump_kv, parse_kv

C_LIGHT = 2.99792458e8  # m/s
GROUP_INDEX = 1.468

SCATTER_LOG10_R = (-9.0, -7.0)
CONNECTOR_REFLECTIVITY = 1e-4

FIBER_HEADER = "opufid-fiber v1"
CHAIN_HEADER = "opufid-chain v1"


def roundtrip_time(position_m):
    return 2.0 * np.asarray(position_m, dtype=float) * GROUP_INDEX / C_LIGHT


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Fiber:
    fiber_id: str
    length_m: float
    density_per_m: float
    seed: int
    positions_m: np.ndarray = field(repr=False)
    reflectivities: np.ndarray = field(repr=False)

    @property
    def scatter_sites(self):
        return list(zip(self.positions_m.tolist(), self.reflectivities.tolist()))

    @property
    def n_sites(self):
        return len(self.positions_m)

    def reflectors(self):
        return self.positions_m, self.reflectivities

    def same_as(self, other):
        return (
            isinstance(other, Fiber)
            and self.fiber_id == other.fiber_id
            and self.length_m == other.length_m
            and self.density_per_m == other.density_per_m
            and self.seed == other.seed
            and np.array_equal(self.positions_m, other.positions_m)
            and np.array_equal(self.reflectivities, other.reflectivities)
        )


@dataclass(frozen=True, eq=False)
class FiberChain:
    spans: tuple
    connector_reflectivities: tuple

    @property
    def fiber_id(self):
        return "chain:" + "+".join(s.fiber_id for s in self.spans)

    @property
    def length_m(self):
        return float(sum(f.length_m for f in self.spans))

    @property
    def span_offsets_m(self):
        return np.concatenate([[0.0], np.cumsum([f.length_m for f in self.spans])[:-1]])

    @property
    def connector_positions_m(self):
        return np.concatenate([[0.0], np.cumsum([f.length_m for f in self.spans])])

    def reflectors(self):
        pos = [self.connector_positions_m]
        refl = [np.asarray(self.connector_reflectivities, dtype=float)]
        for offset, span in zip(self.span_offsets_m, self.spans):
            pos.append(span.positions_m + offset)
            refl.append(span.reflectivities)
        pos = np.concatenate(pos)
        refl = np.concatenate(refl)
        order = np.argsort(pos, kind="stable")
        return pos[order], refl[order]


@dataclass(frozen=True, eq=False)
class ReflectivityProfile:
    distance_axis_m: np.ndarray
    magnitude: np.ndarray
    resolution_m: float

    def __len__(self):
        return len(self.distance_axis_m)

    def peaks(self, count=None, min_separation=1):
        """Indices of local maxima, strongest first."""
        m = self.magnitude
        left = np.concatenate([[-np.inf], m[:-1]])
        right = np.concatenate([m[1:], [-np.inf]])
        idx = np.flatnonzero((m >= left) & (m > right))
        idx = idx[np.argsort(-m[idx], kind="stable")]
        kept = []
        for i in idx:
            if all(abs(i - j) > min_separation for j in kept):
                kept.append(int(i))
            if count is not None and len(kept) == count:
                break
        return kept


def synthesize_fiber(length_m, scatter_density_per_m, seed, fiber_id=None):
    if not length_m > 0:
        raise InvalidParameterError(f"length_m must be > 0, got {length_m}")
    if not scatter_density_per_m > 0:
        raise InvalidParameterError(f"scatter density must be > 0, got {scatter_density_per_m}")
    seed = int(seed)
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    n = rng.poisson(length_m * scatter_density_per_m)
    positions = np.sort(rng.uniform(0.0, length_m, n))
    lo, hi = SCATTER_LOG10_R
    reflectivities = 10.0 ** rng.uniform(lo, hi, n)
    # continuous draws collide with probability zero; enforce the strict ordering anyway
    keep = np.concatenate([[True], np.diff(positions) > 0]) if n else np.zeros(0, bool)
    return Fiber(
        fiber_id=fiber_id if fiber_id is not None else f"fiber-{seed}",
        length_m=float(length_m),
        density_per_m=float(scatter_density_per_m),
        seed=seed,
        positions_m=_frozen(positions[keep]),
        reflectivities=_frozen(reflectivities[keep]),
    )


def fiber_from_sites(positions_m, reflectivities, length_m, fiber_id="custom"):
    """Hand-built fiber (tests, single-reflector calibrations). Not serializable."""
    positions = np.asarray(positions_m, dtype=float)
    refl = np.asarray(reflectivities, dtype=float)
    if positions.shape != refl.shape:
        raise InvalidParameterError("positions and reflectivities differ in length")
    if len(positions) and (np.any(np.diff(positions) <= 0) or positions[0] < 0 or positions[-1] > length_m):
        raise InvalidParameterError("sites must be strictly ascending inside [0, length_m]")
    if np.any((refl <= 0) | (refl > 1)):
        raise InvalidParameterError("reflectivities must lie in (0, 1]")
    return Fiber(fiber_id, float(length_m), 0.0, -1, _frozen(positions), _frozen(refl))


def concatenate(fibers, connector_reflectivities=None):
    fibers = tuple(fibers)
    if not fibers:
        raise InvalidParameterError("a chain needs at least one fiber")
    if connector_reflectivities is None:
        connector_reflectivities = [CONNECTOR_REFLECTIVITY] * (len(fibers) + 1)
    conn = tuple(float(r) for r in connector_reflectivities)
    if len(conn) != len(fibers) + 1:
        raise InvalidParameterError(
            f"{len(fibers)} spans need {len(fibers) + 1} connector reflectivities, got {len(conn)}"
        )
    for i, r in enumerate(conn):
        if not 0 < r <= 1:
            raise InvalidParameterError(f"connector reflectivity {r} outside (0, 1]")
        for span in fibers[max(i - 1, 0):i + 1]:
            if span.n_sites and r <= span.reflectivities.max():
                raise InvalidParameterError(
                    f"connector {i} ({r:g}) does not dominate scatter in adjacent span {span.fiber_id}"
                )
    return FiberChain(spans=fibers, connector_reflectivities=conn)


def reflectivity_profile(target, challenge, adc_bits=None):
    """|DFT| of the noiseless trace, with beat frequency mapped onto distance.

    ``adc_bits`` passes the trace through a uniform ADC before the transform,
    as the path-identification measurements do.
    """
    from .ofdr import acquire, quantize

    trace = acquire(target, challenge)
    samples = trace.samples
    if adc_bits is not None:
        samples = quantize(trace, adc_bits).dequantize()
    magnitude = np.abs(np.fft.rfft(samples))
    res = challenge.resolution_m
    axis = np.arange(len(magnitude)) * res
    return ReflectivityProfile(_frozen(axis), _frozen(magnitude), res)


def fiber_to_text(fiber):
    if fiber.seed < 0:
        raise InvalidParameterError("hand-built fibers carry no seed and cannot be serialized")
    return dump_kv(FIBER_HEADER, [
        ("fiber_id", fiber.fiber_id),
        ("seed", fiber.seed),
        ("length_m", repr(fiber.length_m)),
        ("density_per_m", repr(fiber.density_per_m)),
    ])


def _fiber_from_fields(fields, prefix=""):
    try:
        seed = int(fields[prefix + "seed"])
        length = float(fields[prefix + "length_m"])
        density = float(fields[prefix + "density_per_m"])
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]}") from None
    except ValueError as exc:
        raise ParseError(str(exc)) from None
    return synthesize_fiber(length, density, seed, fields.get(prefix + "fiber_id"))


def fiber_from_text(text):
    return _fiber_from_fields(parse_kv(text, FIBER_HEADER))


def chain_to_text(chain):
    pairs = [("spans", len(chain.spans))]
    for i, span in enumerate(chain.spans):
        if span.seed < 0:
            raise InvalidParameterError("hand-built fibers carry no seed and cannot be serialized")
        pairs += [
            (f"span{i}.fiber_id", span.fiber_id),
            (f"span{i}.seed", span.seed),
            (f"span{i}.length_m", repr(span.length_m)),
            (f"span{i}.density_per_m", repr(span.density_per_m)),
        ]
    pairs.append(("connectors", ",".join(repr(r) for r in chain.connector_reflectivities)))
    return dump_kv(CHAIN_HEADER, pairs)


def chain_from_text(text):
    fields = parse_kv(text, CHAIN_HEADER)
    try:
        n = int(fields["spans"])
        conn = [float(v) for v in fields["connectors"].split(",")]
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad chain header fields: {exc}") from None
    spans = [_fiber_from_fields(fields, f"span{i}.") for i in range(n)]
    return concatenate(spans, conn)


def load_target(path):
    """Read either a fiber or a chain file, dispatching on the header."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    first = text.split("\n", 1)[0].strip()
    if first == CHAIN_HEADER:
        return chain_from_text(text)
    return fiber_from_text(text)
