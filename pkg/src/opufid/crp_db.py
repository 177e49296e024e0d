"""Challenge-response-pair database with Hamming-distance matching.

File format (UTF-8, one record per line, tab separated)::

    opufid-db v1 <db_id>
    key <hex> | key -
    record_id  subsystem_label  challenge_id  k=v,...  scheme  rows  cols  key_id  bits_hex

Saving rewrites the whole file atomically (write-to-temp then rename), so
concurrent readers see either the old or the new database. One writer at a time.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .decision_stats import ThresholdPolicy, hamming, threshold
from .errors import ConflictError, InvalidParameterError, ParseError, StorageError
from .ofdr import Challenge
from .signature import DigitalSignature
from .textio import atomic_write, bits_to_hex, hex_to_bits

DB_MAGIC = "opufid-db"
DB_VERSION = "v1"
DEFAULT_GAMMA = 0.5


@dataclass(frozen=True, eq=False)
class CrpRecord:
    record_id: str
    subsystem_label: str
    challenge: Challenge
    response: DigitalSignature
    key_id: str | None = None

    def __eq__(self, other):
        if not isinstance(other, CrpRecord):
            return NotImplemented
        return (self.record_id == other.record_id
                and self.subsystem_label == other.subsystem_label
                and self.challenge == other.challenge
                and self.key_id == other.key_id
                and self.response.scheme == other.response.scheme
                and self.response.same_bits(other.response))

    __hash__ = None


@dataclass(eq=False)
class CrpDatabase:
    db_id: str
    db_key: np.ndarray | None = None
    records: list = field(default_factory=list)
    m_u: float | None = None
    m_v: float | None = None
    path: str | None = None

    def __post_init__(self):
        if self.db_key is not None:
            key = np.asarray(self.db_key, dtype=np.uint8).ravel()
            if key.size % 4:
                raise InvalidParameterError("db_key length must be a multiple of 4 bits")
            key.setflags(write=False)
            self.db_key = key
        if not self.db_id or any(c in self.db_id for c in " \t\n"):
            raise InvalidParameterError("db_id may not contain whitespace")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        if not isinstance(other, CrpDatabase):
            return NotImplemented
        keys_equal = (self.db_key is None and other.db_key is None) or (
            self.db_key is not None and other.db_key is not None
            and np.array_equal(self.db_key, other.db_key))
        return self.db_id == other.db_id and keys_equal and self.records == other.records

    __hash__ = None

    def get(self, record_id):
        for rec in self.records:
            if rec.record_id == record_id:
                return rec
        raise KeyError(record_id)

    def labels(self, challenge_id=None):
        return {r.subsystem_label for r in self.records
                if challenge_id is None or r.challenge.challenge_id == challenge_id}

    def default_threshold(self, n_bits, gamma=DEFAULT_GAMMA):
        """Threshold from calibration means; uncalibrated databases assume M_U=0, M_V=N/2."""
        m_u = 0.0 if self.m_u is None else self.m_u
        m_v = n_bits / 2 if self.m_v is None else self.m_v
        return threshold(ThresholdPolicy(gamma, min(m_u, m_v), m_v, n_bits))


@dataclass(frozen=True)
class MatchResult:
    outcome: str  # matched | no_match | ambiguous
    best_record_id: str | None
    best_hd: int | None
    threshold_used: float
    n_compared: int = 0
    n_skipped: int = 0
    n_within: int = 0

    @property
    def matched(self):
        return self.outcome == "matched"


def _check_field(value, name):
    if value is None:
        return
    if "\t" in value or "\n" in value or value == "":
        raise InvalidParameterError(f"{name} must be nonempty and free of tabs/newlines")


def enroll(db, subsystem_label, challenge, response, key_id=None, record_id=None):
    _check_field(subsystem_label, "subsystem_label")
    _check_field(challenge.challenge_id, "challenge_id")
    _check_field(key_id, "key_id")
    if not isinstance(response, DigitalSignature):
        raise InvalidParameterError("response must be a DigitalSignature")
    for rec in db.records:
        if rec.subsystem_label == subsystem_label and rec.challenge.challenge_id == challenge.challenge_id:
            raise ConflictError(
                f"{subsystem_label!r} already enrolled under challenge {challenge.challenge_id!r}"
            )
    if record_id is None:
        record_id = f"{db.db_id}-{len(db.records) + 1:06d}"
    _check_field(record_id, "record_id")
    if any(r.record_id == record_id for r in db.records):
        raise ConflictError(f"record id {record_id!r} already present")
    db.records.append(CrpRecord(record_id, subsystem_label, challenge, response, key_id))
    if db.path is not None:
        save(db, db.path)
    return record_id


def lookup(db, probe, t=None, challenge_id=None, gamma=DEFAULT_GAMMA):
    """Match ``probe`` against every record of the same shape (and challenge, if given).

    ``matched`` requires exactly one record within the threshold; two or more
    give ``ambiguous`` rather than a best-HD tie-break.
    """
    if t is None:
        t = db.default_threshold(probe.n_bits, gamma)
    compared = skipped = 0
    best = None
    within = []
    for rec in db.records:
        if challenge_id is not None and rec.challenge.challenge_id != challenge_id:
            continue
        if rec.response.shape != probe.shape:
            skipped += 1
            continue
        compared += 1
        hd = hamming(rec.response, probe)
        if best is None or (hd, rec.record_id) < best:
            best = (hd, rec.record_id)
        if hd <= t:
            within.append(rec.record_id)
    if len(within) == 1:
        outcome = "matched"
    elif len(within) > 1:
        outcome = "ambiguous"
    else:
        outcome = "no_match"
    return MatchResult(outcome, best and best[1], best and best[0], float(t), compared, skipped, len(within))


def _params_text(challenge):
    return ",".join(f"{k}={v!r}" for k, v in challenge.params().items())


def record_line(rec):
    r = rec.response
    return "\t".join([
        rec.record_id,
        rec.subsystem_label,
        rec.challenge.challenge_id,
        _params_text(rec.challenge),
        r.scheme,
        str(r.rows),
        str(r.cols),
        rec.key_id if rec.key_id is not None else "-",
        bits_to_hex(r.flat()),
    ])


def to_text(db):
    key = bits_to_hex(db.db_key) if db.db_key is not None and db.db_key.size else "-"
    lines = [f"{DB_MAGIC} {DB_VERSION} {db.db_id}", f"key {key}"]
    lines += [record_line(r) for r in db.records]
    return "\n".join(lines) + "\n"


def save(db, path):
    atomic_write(path, to_text(db))


def _parse_record(line, lineno):
    parts = line.split("\t")
    if len(parts) != 9:
        raise ParseError(f"expected 9 tab-separated fields, got {len(parts)}", line=lineno)
    rid, label, cid, params, scheme, rows, cols, key_id, hexbits = parts
    try:
        kv = dict(item.split("=", 1) for item in params.split(",")) if params else {}
        challenge = Challenge.from_params(cid, kv)
        rows, cols = int(rows), int(cols)
        bits = hex_to_bits(hexbits, rows * cols).reshape(rows, cols)
        response = DigitalSignature(bits, scheme)
    except (ValueError, InvalidParameterError) as exc:
        raise ParseError(f"malformed record: {exc}", line=lineno) from None
    return CrpRecord(rid, label, challenge, response, None if key_id == "-" else key_id)


def from_text(text, path=None):
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty database file", line=1)
    head = lines[0].split(" ")
    if len(head) != 3 or head[0] != DB_MAGIC:
        raise ParseError(f"not an opufid database header: {lines[0]!r}", line=1)
    if head[1] != DB_VERSION:
        raise ParseError(f"unsupported database version {head[1]!r}", line=1)
    if len(lines) < 2 or not lines[1].startswith("key "):
        raise ParseError("missing key line", line=2)
    key_text = lines[1][4:].strip()
    try:
        key = None if key_text == "-" else hex_to_bits(key_text, 4 * len(key_text))
    except ValueError as exc:
        raise ParseError(f"bad key: {exc}", line=2) from None
    db = CrpDatabase(head[2], key)
    seen = set()
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        rec = _parse_record(line, lineno)
        if rec.record_id in seen:
            raise ParseError(f"duplicate record id {rec.record_id!r}", line=lineno)
        seen.add(rec.record_id)
        db.records.append(rec)
    db.path = path
    return db


def load(path, m_u=None, m_v=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    db = from_text(text, os.fspath(path))
    db.m_u, db.m_v = m_u, m_v
    return db


def dual_databases(entries, k1, k2, d1_id="D1", d2_id="D2", k1_id="k1", k2_id="k2"):
    """Build D1/D2 holding the same challenge/response set, differing only in key.

    ``entries`` yields ``(label, challenge, data_bits)``; each stored ID is the
    data bits with that database's key appended.
    """
    d1, d2 = CrpDatabase(d1_id, k1), CrpDatabase(d2_id, k2)
    for label, challenge, data in entries:
        data = np.asarray(data, dtype=np.uint8).ravel()
        for db, key_id in ((d1, k1_id), (d2, k2_id)):
            flat = np.concatenate([data, db.db_key])
            side = math.isqrt(flat.size)
            if side * side != flat.size:
                raise InvalidParameterError(f"{flat.size} bits do not form a square ID")
            enroll(db, label, challenge, DigitalSignature(flat.reshape(side, side), "direct", db.db_key.size), key_id)
    return d1, d2
