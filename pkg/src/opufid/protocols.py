"""Identification sessions between a central node (CN), users and adversaries.

Each session appends one transcript step per numbered step of its protocol
listing and ends with a single outcome: ``identified``, ``rejected[:reason]`` or
``failed:<reason>``. Messages travel through an in-process :class:`Channel`
whose optional hook can observe, modify or replace them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import crp_db
from .errors import (
    AcquisitionError,
    DegenerateSegmentError,
    EmptyOverlapError,
    InsufficientEntropyError,
    InvalidParameterError,
    OutOfRangeError,
)
from .fiber_model import reflectivity_profile
from .ofdr import acquire, quantize
from .signature import (
    DigitalSignature,
    cascade_intersections_I,
    cascade_intersections_II,
    half_and_half,
    intersect,
    make_signature_direct,
    quantize_intersections,
    select_window,
)
from .textio import atomic_write

ROLES = ("central_node", "user", "adversary")
WINDOW_M = 0.26
PATH_ADC_BITS = 6

EXIT_CODES = {"identified": 0, "rejected": 2, "failed": 3}


@dataclass
class Party:
    role: str
    target: object = None
    keys: dict = field(default_factory=dict)
    label: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvalidParameterError(f"unknown role {self.role!r}")
        self.keys = {k: np.asarray(v, dtype=np.uint8).ravel() for k, v in self.keys.items()}


class SessionTranscript:
    def __init__(self, protocol):
        self.protocol = protocol
        self.steps = []
        self.outcome = None
        self.counters = {"messages": 0}

    def step(self, label, actor, summary):
        if self.outcome is not None:
            raise RuntimeError("session already terminated")
        self.steps.append((label, actor, summary))

    def finish(self, outcome):
        if self.outcome is not None:
            raise RuntimeError(f"outcome already set to {self.outcome!r}")
        self.outcome = outcome
        return self

    @property
    def step_labels(self):
        return [s[0] for s in self.steps]

    @property
    def identified(self):
        return self.outcome == "identified"

    @property
    def exit_code(self):
        return EXIT_CODES[self.outcome.split(":", 1)[0]]

    def to_text(self):
        lines = [f"{label}\t{actor}\t{summary}" for label, actor, summary in self.steps]
        lines.append(f"outcome\t{self.outcome}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        atomic_write(path, self.to_text())


class Channel:
    """In-process message transport. ``hook(kind, sender, receiver, payload)`` may return a replacement payload."""

    def __init__(self, hook=None):
        self.hook = hook
        self.log = []

    def send(self, transcript, kind, sender, receiver, payload):
        if self.hook is not None:
            replaced = self.hook(kind, sender, receiver, payload)
            if replaced is not None:
                payload = replaced
        self.log.append((kind, sender, receiver))
        transcript.counters["messages"] += 1
        return payload


def _hd_summary(match):
    best = "-" if match.best_hd is None else str(match.best_hd)
    return (f"outcome={match.outcome} best={match.best_record_id or '-'} hd={best} "
            f"t={match.threshold_used:.9g} compared={match.n_compared} skipped={match.n_skipped}")


def _decide(db, match, label, challenge_id):
    if match.outcome == "ambiguous":
        return "failed:ambiguous"
    if label is not None and label not in db.labels(challenge_id):
        return "failed:not-enrolled"
    if match.outcome == "matched":
        rec = db.get(match.best_record_id)
        if label is None or rec.subsystem_label == label:
            return "identified"
    # nothing claimed and nothing found: the prober is simply unknown
    return "rejected" if label is not None else "failed:identification"


def _source(party):
    return party.role if party.label is None else f"{party.role}:{party.label}"


# -- direct sub-system identification (access segment) ---------------------------------

def direct_id(target, challenge, key_bits, snr_db=math.inf, seed=None):
    trace = acquire(target, challenge, snr_db, seed)
    return make_signature_direct(trace, key_bits)


def identify_subsystem(cn, user, challenge, db, snr_db=math.inf, seed=None, t=None, key_bits=None,
                       channel=None):
    """CN acquires the user's pigtail RBP, builds the direct ID and looks it up."""
    tr = SessionTranscript("direct")
    channel = channel or Channel()
    key = db.db_key if key_bits is None else key_bits
    challenge = channel.send(tr, "challenge", "CN", _source(user), challenge)
    try:
        trace = acquire(user.target, challenge, snr_db, seed)
    except (AcquisitionError, InvalidParameterError) as exc:
        tr.step("acquire", "CN", f"challenge={challenge.challenge_id} error={exc}")
        return tr.finish("failed:acquisition")
    tr.step("acquire", "CN", f"challenge={challenge.challenge_id} samples={len(trace)} snr_db={snr_db:.9g}")
    try:
        sig = make_signature_direct(trace, key)
    except InvalidParameterError as exc:
        tr.step("sign", "CN", f"error={exc}")
        return tr.finish("failed:signature")
    tr.step("sign", "CN", f"scheme=direct shape={sig.rows}x{sig.cols} key_len={sig.key_len}")
    match = crp_db.lookup(db, sig, t, challenge_id=challenge.challenge_id)
    tr.step("lookup", "CN", _hd_summary(match))
    tr.counters["best_hd"] = match.best_hd
    return tr.finish(_decide(db, match, user.label, challenge.challenge_id))


# -- path identification (protocols 1-3) ------------------------------------------------

def default_windows(chain, length_m=WINDOW_M):
    """One window per span, centred in the span."""
    out = []
    for offset, span in zip(chain.span_offsets_m, chain.spans):
        if span.length_m < length_m:
            raise InvalidParameterError(f"span {span.fiber_id} shorter than the {length_m} m window")
        out.append((float(offset + (span.length_m - length_m) / 2), length_m))
    return out


def path_challenge(challenge, protocol):
    """Challenge id under which a protocol's path IDs are stored (one reference per protocol)."""
    return challenge.with_id(f"{challenge.challenge_id}/p{protocol}")


def _path_points(segments, protocol, subset_rule):
    if protocol == 1:
        return intersect(segments[0], segments[1], label="J")
    if protocol == 2:
        return cascade_intersections_I(*segments)
    return cascade_intersections_II(*segments, subset_rule=subset_rule)


def path_id(chain, challenge, protocol, windows=None, key_bits=None, adc_bits=PATH_ADC_BITS,
            subset_rule=half_and_half):
    """ID of a chain under protocol 1, 2 or 3 (no transcript); used for enrollment."""
    n_spans = 2 if protocol == 1 else 3
    windows = windows or default_windows(chain)
    if len(windows) != n_spans:
        raise InvalidParameterError(f"protocol {protocol} needs {n_spans} windows")
    profile = reflectivity_profile(chain, challenge, adc_bits)
    segs = [select_window(profile, s, w, f"S{i + 1}") for i, (s, w) in enumerate(windows)]
    points = _path_points(segs, protocol, subset_rule)
    return quantize_intersections(points, key_bits, provenance=f"p{protocol}")


def enroll_path(db, label, chain, challenge, protocol, windows=None, key_bits=None, key_id=None,
                adc_bits=PATH_ADC_BITS, subset_rule=half_and_half):
    sig = path_id(chain, challenge, protocol, windows, key_bits, adc_bits, subset_rule)
    return crp_db.enroll(db, label, path_challenge(challenge, protocol), sig, key_id)


_PATH_STEPS = {
    1: ["measure", "select", "intersect", "quantize", "identify"],
    2: ["measure", "select", "intersect-J1", "intersect-J2", "quantize", "identify"],
    3: ["measure", "select", "intersect-J1", "intersect-J2", "subset-J3", "quantize", "identify"],
}


def protocol_step_names(protocol):
    return list(_PATH_STEPS[protocol])


def _run_path_protocol(protocol, chain, challenge, windows, db, t, label, key_bits, adc_bits,
                       subset_rule):
    n_spans = 2 if protocol == 1 else 3
    tr = SessionTranscript(f"protocol{protocol}")
    names = iter(_PATH_STEPS[protocol])

    def step(summary):
        n = len(tr.steps) + 1
        tr.step(f"{n}", "CN", f"{next(names)}: {summary}")

    if len(chain.spans) != n_spans:
        raise InvalidParameterError(f"protocol {protocol} needs a chain of {n_spans} spans")
    windows = windows or default_windows(chain)
    if len(windows) != n_spans:
        raise InvalidParameterError(f"protocol {protocol} needs {n_spans} windows")

    profile = reflectivity_profile(chain, challenge, adc_bits)
    step(f"challenge={challenge.challenge_id} bins={len(profile)} res_m={profile.resolution_m:.9g}")
    try:
        segs = [select_window(profile, s, w, f"S{i + 1}") for i, (s, w) in enumerate(windows)]
    except OutOfRangeError as exc:
        step(f"error={exc}")
        return tr.finish("failed:out-of-range")
    except DegenerateSegmentError as exc:
        step(f"error={exc}")
        return tr.finish("failed:degenerate-segment")
    step(" ".join(f"{s.label}={len(s)}pts" for s in segs))

    try:
        if protocol == 1:
            pts = intersect(segs[0], segs[1], label="J")
            step(f"J={len(pts)}")
        elif protocol == 2:
            j1 = intersect(segs[0], segs[1], label="J1")
            step(f"J1={len(j1)}")
            if len(j1) == 0:
                return tr.finish("failed:insufficient-entropy")
            pts = intersect(j1.as_segment("J1"), segs[2], label="J2")
            step(f"J2={len(pts)}")
        else:
            j1 = intersect(segs[0], segs[1], label="J1")
            step(f"J1={len(j1)}")
            j2 = intersect(segs[0], segs[2], label="J2")
            step(f"J2={len(j2)}")
            if len(j1) == 0 and len(j2) == 0:
                return tr.finish("failed:insufficient-entropy")
            pts = subset_rule(j1, j2)
            step(f"J3={len(pts)}")
    except EmptyOverlapError as exc:
        step(f"error={exc}")
        return tr.finish("failed:insufficient-entropy")

    try:
        sig = quantize_intersections(pts, key_bits, provenance=f"p{protocol}")
    except InsufficientEntropyError as exc:
        step(f"error={exc}")
        return tr.finish("failed:insufficient-entropy")
    step(f"shape={sig.rows}x{sig.cols}")

    cid = path_challenge(challenge, protocol).challenge_id
    match = crp_db.lookup(db, sig, t, challenge_id=cid)
    step(_hd_summary(match))
    tr.counters["best_hd"] = match.best_hd
    return tr.finish(_decide(db, match, label, cid))


def protocol1_two_subsystems(chain, challenge, windows, db, t=None, label=None, key_bits=None,
                             adc_bits=PATH_ADC_BITS):
    return _run_path_protocol(1, chain, challenge, windows, db, t, label, key_bits, adc_bits, None)


def protocol2_cascaded(chain, challenge, windows, db, t=None, label=None, key_bits=None,
                       adc_bits=PATH_ADC_BITS):
    return _run_path_protocol(2, chain, challenge, windows, db, t, label, key_bits, adc_bits, None)


def protocol3_cascaded(chain, challenge, windows, db, t=None, label=None, key_bits=None,
                       adc_bits=PATH_ADC_BITS, subset_rule=half_and_half):
    return _run_path_protocol(3, chain, challenge, windows, db, t, label, key_bits, adc_bits,
                              subset_rule)


# -- CN-assisted identification with two keyed databases (protocol 4) --------------------

PROTOCOL4_STEPS = ["1", "2", "3", "4", "5", "6", "6a.i", "6a.ii"]


def _pick_database(r1, r2):
    matched = [(r.best_hd, i) for i, r in enumerate((r1, r2)) if r.matched]
    if len(matched) == 1:
        return matched[0][1]
    if len(matched) == 2:
        # the data bits are shared; only the key tail separates the two stores
        if matched[0][0] == matched[1][0]:
            return "ambiguous"
        return min(matched)[1]
    if r1.outcome == "ambiguous" or r2.outcome == "ambiguous":
        return "ambiguous"
    return None


def protocol4_cn_assisted(cn, user, d1, d2, challenge, chosen_key_id=None, snr_db=math.inf, seed=None,
                          declared_key_id=None, t=None, channel=None):
    tr = SessionTranscript("protocol4")
    channel = channel or Channel()
    rng = np.random.default_rng(seed)
    noise_seed = int(rng.integers(0, 2 ** 63 - 1))
    who = _source(user)

    challenge = channel.send(tr, "challenge", "CN", who, challenge)
    tr.step("1", "CN", f"send challenge {challenge.challenge_id}")

    try:
        trace = acquire(user.target, challenge, snr_db, noise_seed)
    except (AcquisitionError, InvalidParameterError) as exc:
        tr.step("2", who, f"error={exc}")
        return tr.finish("failed:acquisition")
    tr.step("2", who, f"measure R1 samples={len(trace)} snr_db={snr_db:.9g}")

    data = quantize(trace, 1).levels.astype(np.uint8)
    tr.step("3", who, f"two-level quantization ones={int(data.sum())}/{data.size}")

    key_len = d1.db_key.size
    if user.keys:
        used = chosen_key_id if chosen_key_id is not None else sorted(user.keys)[int(rng.integers(len(user.keys)))]
        if used not in user.keys:
            raise InvalidParameterError(f"user holds no key {used!r}")
        key = user.keys[used]
    else:
        # no legitimate key: pad with guessed bits
        used, key = None, rng.integers(0, 2, key_len).astype(np.uint8)
    flat = np.concatenate([data, key])
    side = math.isqrt(flat.size)
    if side * side != flat.size:
        raise InvalidParameterError(f"{data.size} data + {key.size} key bits do not form a square ID")
    sig = DigitalSignature(flat.reshape(side, side), "direct", key.size, f"{challenge.challenge_id}:{who}")
    tr.step("4", who, f"key concatenation key={used or 'none'} shape={side}x{side}")

    sig = channel.send(tr, "id", who, "CN", sig)
    tr.step("5", who, "send ID to CN")

    if t is None:
        t = d1.default_threshold(sig.n_bits)
    r1 = crp_db.lookup(d1, sig, t, challenge_id=challenge.challenge_id)
    r2 = crp_db.lookup(d2, sig, t, challenge_id=challenge.challenge_id)
    tr.step("6", "CN", f"{d1.db_id}[{_hd_summary(r1)}] {d2.db_id}[{_hd_summary(r2)}]")
    pick = _pick_database(r1, r2)
    if pick is None:
        tr.step("6b", "CN", "match not found")
        return tr.finish("failed:identification")
    if pick == "ambiguous":
        tr.step("6b", "CN", "ambiguous match")
        return tr.finish("failed:ambiguous")
    db, match = ((d1, r1), (d2, r2))[pick]
    label = db.get(match.best_record_id).subsystem_label

    declared = declared_key_id if declared_key_id is not None else used
    if declared is not None and declared in user.keys:
        reply = (declared, user.keys[declared])
    else:
        reply = (declared or "none", rng.integers(0, 2, key_len).astype(np.uint8))
    reply = channel.send(tr, "key", who, "CN", reply)
    tr.step("6a.i", "CN", f"match in {db.db_id} label={label}; asked for key, user declared {reply[0]}")

    ok = np.array_equal(np.asarray(reply[1], dtype=np.uint8), db.db_key)
    tr.step("6a.ii", "CN", f"key-database correspondence {'verified' if ok else 'violated'} for {db.db_id}")
    tr.counters["best_hd"] = match.best_hd
    return tr.finish("identified" if ok else "rejected:key-mismatch")
