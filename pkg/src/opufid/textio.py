"""Shared text dialect: a versioned header line followed by ``key=value`` lines.

Also holds the bit <-> hex helpers used by the signature and database formats.
"""
import os
import tempfile

import numpy as np

from .errors import ParseError, StorageError


def fmt_num(x):
    """Fixed-precision (9 significant digits) rendering for reports and CSV."""
    return f"{float(x):.9g}"


def dump_kv(header, pairs):
    lines = [header]
    for key, value in pairs:
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def parse_kv(text, header):
    lines = text.splitlines()
    if not lines or lines[0].strip() != header:
        got = lines[0].strip() if lines else "<empty>"
        raise ParseError(f"expected header {header!r}, got {got!r}", line=1)
    out = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"malformed line {line!r}", line=lineno)
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_config(text):
    """Config files use the same dialect without a mandatory header."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith("opufid-"):
            continue
        if "=" not in line:
            raise ParseError(f"malformed config line {line!r}", line=lineno)
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def atomic_write(path, text):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def bits_to_hex(bits):
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    pad = (-len(bits)) % 4
    if pad:
        bits = np.concatenate([bits, np.zeros(pad, dtype=np.uint8)])
    nibbles = bits.reshape(-1, 4) @ np.array([8, 4, 2, 1])
    return "".join("0123456789abcdef"[n] for n in nibbles)


def hex_to_bits(text, n_bits):
    text = text.strip().lower()
    if len(text) != (n_bits + 3) // 4:
        raise ValueError(f"hex string of length {len(text)} cannot hold {n_bits} bits")
    try:
        values = [int(ch, 16) for ch in text]
    except ValueError:
        raise ValueError(f"invalid hex digit in {text[:16]!r}...") from None
    out = np.array([[(v >> s) & 1 for s in (3, 2, 1, 0)] for v in values], dtype=np.uint8).ravel()
    if np.any(out[n_bits:]):
        raise ValueError("nonzero padding bits")
    return out[:n_bits]
