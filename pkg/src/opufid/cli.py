"""``opufid`` command line.

Exit codes: 0 success / identified, 2 rejected, 3 failed, 1 runtime error,
64 usage error. Numbers are printed with 9 significant digits.
"""
from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import crp_db, protocols
from .decision_stats import (
    curve_csv,
    error_curve,
    hd_statistics,
    histogram_csv,
    inner_hd,
    inter_hd,
    intra_hd,
)
from .errors import OpufidError, ParseError
from .fiber_model import (
    chain_to_text,
    concatenate,
    fiber_to_text,
    load_target,
    synthesize_fiber,
)
from .ofdr import Challenge, acquire, quantize, write_quantized_csv, write_trace_csv
from .signature import DigitalSignature, export_qr, load_signature, make_signature_direct, save_signature
from .textio import atomic_write, fmt_num, hex_to_bits, parse_config

EXIT_USAGE = 64
EXIT_ERROR = 1
KEY_BITS = 96
PIGTAIL_LENGTH_M = 0.5
SPAN_LENGTH_M = 0.6
DENSITY_PER_M = 1000.0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- argument helpers -----------------------------------------------------------------

def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _snr(text):
    return math.inf if text.strip().lower() in ("inf", "+inf", "none") else float(text)


def _window(text):
    try:
        start, length = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must be START:LENGTH, got {text!r}") from None
    return start, length


def _add_common(p, top=False):
    d = None if top else argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=d, help="master seed (all randomness derives from it)")
    p.add_argument("--config", default=d, help="key=value file supplying defaults for any flag")
    p.add_argument("--out", default=d, help="output file (or directory for `exp`)")


def _add_challenge(p):
    g = p.add_argument_group("challenge")
    g.add_argument("--challenge-id", default="C1")
    g.add_argument("--e0", type=float, default=1.0)
    g.add_argument("--sweep-rate", type=float, default=None, help="Hz/s (default: 1 mm per DFT bin)")
    g.add_argument("--sweep-time", type=float, default=None, help="s")
    g.add_argument("--samples", type=int, default=None)
    g.add_argument("--gate", type=_floats, default=None, help="START,END distance gate in m")


def _challenge(args):
    kw = {"challenge_id": args.challenge_id, "e0": args.e0}
    if args.sweep_rate is not None:
        kw["sweep_rate_hz_per_s"] = args.sweep_rate
    if args.sweep_time is not None:
        kw["sweep_time_s"] = args.sweep_time
    if args.samples is not None:
        kw["n_samples"] = args.samples
    if args.gate is not None:
        if len(args.gate) != 2:
            raise UsageError("--gate needs START,END")
        kw["window_start_m"], kw["window_end_m"] = args.gate
    return Challenge(**kw)


def _key(text):
    return None if text is None else hex_to_bits(text, 4 * len(text))


def sub_seed(*parts):
    """Independent 63-bit seed for a (master seed, tag, index...) tuple."""
    ss = np.random.SeedSequence([int(p) & (2 ** 64 - 1) for p in parts])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _seeded_key(seed, index=0):
    return np.random.default_rng(sub_seed(seed, 3, index)).integers(0, 2, KEY_BITS).astype(np.uint8)


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError("missing " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _seed(args, default=0):
    return default if getattr(args, "seed", None) is None else args.seed


def _write(args, text, default_name=None):
    path = getattr(args, "out", None) or default_name
    if path is None:
        sys.stdout.write(text)
    else:
        atomic_write(path, text)


# -- commands ---------------------------------------------------------------------------

def cmd_fiber_gen(args):
    _require(args, "seed")
    f = synthesize_fiber(args.length_m, args.density, args.seed, args.id)
    _write(args, fiber_to_text(f))
    print(f"fiber {f.fiber_id} sites={f.n_sites}", file=sys.stderr)
    return 0


def cmd_chain_build(args):
    if args.fiber:
        spans = [load_target(p) for p in args.fiber]
    elif args.seeds:
        spans = [synthesize_fiber(args.length_m, args.density, int(s)) for s in args.seeds]
    else:
        raise UsageError("give --fiber FILE (repeatable) or --seeds S1,S2,...")
    conn = None if args.connector is None else [args.connector] * (len(spans) + 1)
    _write(args, chain_to_text(concatenate(spans, conn)))
    return 0


def cmd_acquire(args):
    _require(args, "target")
    target = load_target(args.target)
    trace = acquire(target, _challenge(args), args.snr, _seed(args))
    out = args.out or "trace.csv"
    write_trace_csv(trace, out)
    if args.quantize:
        write_quantized_csv(quantize(trace, args.quantize), os.path.splitext(out)[0] + f"_q{args.quantize}.csv")
    return 0


def cmd_sign(args):
    _require(args, "target")
    target = load_target(args.target)
    ch = _challenge(args)
    key = _key(args.key)
    if args.protocol == "direct":
        sig = make_signature_direct(acquire(target, ch, args.snr, _seed(args)), key)
    else:
        sig = protocols.path_id(target, ch, int(args.protocol), args.window, key)
    save_signature(sig, args.out or "signature.txt")
    print(f"signature {sig.scheme} {sig.rows}x{sig.cols} key_len={sig.key_len}")
    return 0


def _open_db(path, db_id, key, m_u=None, m_v=None):
    if os.path.exists(path):
        db = crp_db.load(path, m_u, m_v)
        if key is not None and (db.db_key is None or not np.array_equal(db.db_key, key)):
            raise UsageError(f"{path} already exists with a different key")
        return db
    return crp_db.CrpDatabase(db_id, key, m_u=m_u, m_v=m_v)


def cmd_enroll(args):
    _require(args, "db", "target")
    target = load_target(args.target)
    label = args.label or target.fiber_id
    ch = _challenge(args)
    seed = _seed(args)
    key = _key(args.db_key)
    if key is None and not os.path.exists(args.db):
        key = _seeded_key(seed, 0)
    db = _open_db(args.db, args.db_id, key)
    if args.protocol != "direct":
        if args.d2:
            raise UsageError("--d2 applies to direct IDs only")
        rid = protocols.enroll_path(db, label, target, ch, int(args.protocol), args.window, key_id=args.key_id)
        crp_db.save(db, args.db)
        print(f"enrolled {label} as {rid}")
        return 0
    data = quantize(acquire(target, ch), 1).levels.astype(np.uint8)
    dbs = [(db, args.db, args.key_id or ("k1" if args.d2 else None))]
    if args.d2:
        key2 = _key(args.d2_key)
        if key2 is None and not os.path.exists(args.d2):
            key2 = _seeded_key(seed, 1)
        dbs.append((_open_db(args.d2, args.d2_id, key2), args.d2, "k2"))
    for d, path, key_id in dbs:
        if d.db_key is None:
            raise UsageError(f"{path} has no key; direct IDs need key bits")
        flat = np.concatenate([data, d.db_key])
        side = math.isqrt(flat.size)
        if side * side != flat.size:
            raise UsageError(f"{data.size} data + {d.db_key.size} key bits are not a square")
        sig = DigitalSignature(flat.reshape(side, side), "direct", d.db_key.size)
        rid = crp_db.enroll(d, label, ch, sig, key_id)
        crp_db.save(d, path)
        print(f"enrolled {label} as {rid}")
    return 0


def _finish_session(args, tr):
    _write(args, tr.to_text(), "transcript.txt")
    best = tr.counters.get("best_hd")
    print(f"outcome={tr.outcome} best_hd={'-' if best is None else best}")
    return tr.exit_code


def cmd_identify(args):
    _require(args, "db", "target")
    db = crp_db.load(args.db, args.m_u, args.m_v)
    target = load_target(args.target)
    user = protocols.Party("user", target, label=args.label or target.fiber_id)
    t = args.t
    if t is None and db.records:
        t = db.default_threshold(db.records[0].response.n_bits, args.gamma)
    tr = protocols.identify_subsystem(protocols.Party("central_node"), user, _challenge(args), db,
                                      args.snr, _seed(args), t)
    return _finish_session(args, tr)


def cmd_protocol(args):
    _require(args, "target")
    target = load_target(args.target)
    ch = _challenge(args)
    if args.number == 4:
        _require(args, "d1", "d2")
        d1 = crp_db.load(args.d1, args.m_u, args.m_v)
        d2 = crp_db.load(args.d2, args.m_u, args.m_v)
        pool = {"k1": d1.db_key, "k2": d2.db_key}
        held = [] if args.hold in ("", "none") else args.hold.split(",")
        if set(held) - set(pool):
            raise UsageError("--hold takes k1, k2, k1,k2 or none")
        role = "user" if held else "adversary"
        user = protocols.Party(role, target, {k: pool[k] for k in held}, label=target.fiber_id)
        tr = protocols.protocol4_cn_assisted(protocols.Party("central_node"), user, d1, d2, ch, args.use,
                                             args.snr, _seed(args), args.declare, args.t)
        return _finish_session(args, tr)
    _require(args, "db")
    db = crp_db.load(args.db, args.m_u, args.m_v)
    runner = {1: protocols.protocol1_two_subsystems, 2: protocols.protocol2_cascaded,
              3: protocols.protocol3_cascaded}[args.number]
    tr = runner(target, ch, args.window, db, args.t, args.label or target.fiber_id)
    return _finish_session(args, tr)


def cmd_export_qr(args):
    _require(args, "sig")
    export_qr(load_signature(args.sig), args.out or "id.pbm")
    return 0


# -- experiments ---------------------------------------------------------------------------

def _summary_csv(kind, stats, n_bits, extra=()):
    head = ["kind", "n", "n_bits", "mean", "variance"] + [k for k, _ in extra]
    row = [kind, str(int(stats.counts.sum())), str(n_bits), fmt_num(stats.mean), fmt_num(stats.variance)]
    row += [str(v) for _, v in extra]
    return ",".join(head) + "\n" + ",".join(row) + "\n"


def _exp_out(args, name):
    out = args.out or "results"
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, name)


def _report(args, kind, exp):
    stats = hd_statistics(exp)
    atomic_write(_exp_out(args, f"{kind}_hist.csv"), histogram_csv(stats))
    atomic_write(_exp_out(args, f"{kind}_summary.csv"), _summary_csv(kind, stats, exp.n_bits))
    print(f"{kind}: n={len(exp)} mean={fmt_num(stats.mean)} variance={fmt_num(stats.variance)}")
    return stats


def _pigtail(args, seed):
    return synthesize_fiber(args.length_m, args.density, seed)


def _intra(args, fiber, ch, key, snr):
    ref = make_signature_direct(acquire(fiber, ch), key)
    probes = (make_signature_direct(acquire(fiber, ch, snr, sub_seed(_seed(args), 1, r)), key) for r in range(args.reps))
    return intra_hd(ref, probes)


def _inter(args, fiber, ch, key):
    probe = make_signature_direct(acquire(fiber, ch), key)
    refs = []
    for r in range(args.reps):
        k = _seeded_key(_seed(args), 100 + r) if args.key_mode == "per-fiber" else key
        refs.append(make_signature_direct(acquire(_pigtail(args, sub_seed(_seed(args), 2, r)), ch), k))
    return inter_hd(probe, refs)


def cmd_exp(args):
    ch = _challenge(args)
    seed = _seed(args, 7)
    key = _key(args.key) if args.key else _seeded_key(seed)
    fiber = synthesize_fiber(args.length_m, args.density, seed)
    kind = args.kind
    if kind == "inner":
        _report(args, kind, inner_hd(make_signature_direct(acquire(fiber, ch), key)))
    elif kind == "intra":
        _report(args, kind, _intra(args, fiber, ch, key, args.snr[0]))
    elif kind == "inter":
        _report(args, kind, _inter(args, fiber, ch, key))
    elif kind == "fpfn":
        return _exp_fpfn(args, fiber, ch, key)
    else:
        return _exp_fake_id(args, ch)
    return 0


def _exp_fpfn(args, fiber, ch, key):
    grid = args.gamma if args.gamma is not None else list(np.linspace(0, 1, 21))
    if any(not 0 <= g <= 1 for g in grid):
        raise UsageError("--gamma values must lie in [0, 1]")
    n_bits = ch.n_samples + key.size
    m_v = args.m_v
    if m_v is None:
        m_v = hd_statistics(_inter(args, fiber, ch, key)).mean
    for snr in args.snr:
        m_u = args.m_u
        if m_u is None:
            m_u = hd_statistics(_intra(args, fiber, ch, key, snr)).mean
        label = "inf" if math.isinf(snr) else fmt_num(snr)
        curve = error_curve(min(m_u, m_v), m_v, n_bits, grid, f"{label}dB")
        atomic_write(_exp_out(args, f"fpfn_snr{label}.csv"), curve_csv(curve))
        print(f"fpfn snr={label}dB m_u={fmt_num(m_u)} m_v={fmt_num(m_v)} rows={len(curve)}")
    return 0


def _exp_fake_id(args, ch):
    """Enroll path IDs of independent two-span chains, then probe with genuine and unenrolled chains."""
    seed = _seed(args, 0)
    db = crp_db.CrpDatabase("FAKEID")

    def chain(kind, i):
        return concatenate([synthesize_fiber(args.span_length_m, args.density, sub_seed(seed, 4 + kind, i, s))
                            for s in range(2)])

    genuine = [chain(0, i) for i in range(args.genuine)]
    for i, c in enumerate(genuine):
        protocols.enroll_path(db, f"path-{i:04d}", c, ch, 1)
    cid = protocols.path_challenge(ch, 1).challenge_id
    rows = []
    for group, targets in (("genuine", genuine), ("fake", [chain(1, i) for i in range(args.fake)])):
        for i, c in enumerate(targets):
            sig = protocols.path_id(c, ch, 1)
            m = crp_db.lookup(db, sig, challenge_id=cid, gamma=args.gamma[0] if args.gamma else 0.5)
            correct = m.matched and db.get(m.best_record_id).subsystem_label == f"path-{i:04d}"
            rows.append((group, i, m.outcome, m.best_hd, m.n_within, group == "genuine" and correct))
    matched = sum(r[2] == "matched" for r in rows)
    rejected = sum(r[2] == "no_match" for r in rows)
    ambiguous = sum(r[2] == "ambiguous" for r in rows)
    false_accepts = sum(r[0] == "fake" and r[2] == "matched" for r in rows)
    correct = sum(r[5] for r in rows)
    lines = ["group,index,outcome,best_hd,n_within"]
    lines += [f"{g},{i},{o},{'-' if h is None else h},{w}" for g, i, o, h, w, _ in rows]
    atomic_write(_exp_out(args, "fake_id_results.csv"), "\n".join(lines) + "\n")
    atomic_write(_exp_out(args, "fake_id_summary.csv"),
                 "genuine,fake,matched,rejected,ambiguous,correct,false_accepts\n"
                 f"{args.genuine},{args.fake},{matched},{rejected},{ambiguous},{correct},{false_accepts}\n")
    print(f"matched={matched} rejected={rejected} ambiguous={ambiguous}")
    return 0


# -- parser -------------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="opufid", description="Fiber-backscatter physical identification toolkit.")
    _add_common(p, top=True)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fiber = sub.add_parser("fiber").add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = fiber.add_parser("gen", help="synthesize a fiber")
    _add_common(g)
    g.add_argument("--length-m", type=float, required=True)
    g.add_argument("--density", type=float, required=True, help="scatter sites per m")
    g.add_argument("--id", default=None)
    g.set_defaults(func=cmd_fiber_gen)

    chain = sub.add_parser("chain").add_subparsers(dest="action", required=True, parser_class=_Parser)
    b = chain.add_parser("build", help="concatenate fibers with connectors")
    _add_common(b)
    b.add_argument("--fiber", action="append", default=None, help="fiber file (repeatable)")
    b.add_argument("--seeds", type=_floats, default=None, help="synthesize spans from these seeds")
    b.add_argument("--length-m", type=float, default=SPAN_LENGTH_M)
    b.add_argument("--density", type=float, default=DENSITY_PER_M)
    b.add_argument("--connector", type=float, default=None, help="connector reflectivity")
    b.set_defaults(func=cmd_chain_build)

    a = sub.add_parser("acquire", help="simulate the beat-signal trace")
    _add_common(a)
    _add_challenge(a)
    a.add_argument("--target", help="fiber or chain file")
    a.add_argument("--snr", type=_snr, default=math.inf, help="dB, or inf")
    a.add_argument("--quantize", type=int, default=None, help="also write an N-bit quantized trace")
    a.set_defaults(func=cmd_acquire)

    s = sub.add_parser("sign", help="build a binary ID")
    _add_common(s)
    _add_challenge(s)
    s.add_argument("--target")
    s.add_argument("--protocol", choices=["direct", "1", "2", "3"], default="direct")
    s.add_argument("--key", default=None, help="key bits as hex")
    s.add_argument("--snr", type=_snr, default=math.inf)
    s.add_argument("--window", type=_window, action="append", default=None, help="START:LENGTH in m")
    s.set_defaults(func=cmd_sign)

    e = sub.add_parser("enroll", help="store a reference ID")
    _add_common(e)
    _add_challenge(e)
    e.add_argument("--db")
    e.add_argument("--db-id", default="D1")
    e.add_argument("--db-key", default=None, help="hex key for a new database (default: derived from --seed)")
    e.add_argument("--d2", default=None, help="second keyed database (same data bits, own key)")
    e.add_argument("--d2-id", default="D2")
    e.add_argument("--d2-key", default=None)
    e.add_argument("--target")
    e.add_argument("--label", default=None, help="default: the target's id")
    e.add_argument("--key-id", default=None)
    e.add_argument("--protocol", choices=["direct", "1", "2", "3"], default="direct")
    e.add_argument("--window", type=_window, action="append", default=None)
    e.set_defaults(func=cmd_enroll)

    def decision_flags(q):
        q.add_argument("--t", type=float, default=None, help="HD threshold (default from gamma and means)")
        q.add_argument("--gamma", type=float, default=0.5)
        q.add_argument("--m-u", type=float, default=None, help="calibrated mean genuine HD")
        q.add_argument("--m-v", type=float, default=None, help="calibrated mean impostor HD")

    i = sub.add_parser("identify", help="direct sub-system identification session")
    _add_common(i)
    _add_challenge(i)
    i.add_argument("--db")
    i.add_argument("--target")
    i.add_argument("--label", default=None)
    i.add_argument("--snr", type=_snr, default=math.inf)
    decision_flags(i)
    i.set_defaults(func=cmd_identify)

    pr = sub.add_parser("protocol", help="path protocols 1-3, CN-assisted protocol 4")
    _add_common(pr)
    _add_challenge(pr)
    pr.add_argument("number", type=int, choices=[1, 2, 3, 4])
    pr.add_argument("--target")
    pr.add_argument("--db")
    pr.add_argument("--label", default=None)
    pr.add_argument("--window", type=_window, action="append", default=None)
    pr.add_argument("--d1")
    pr.add_argument("--d2")
    pr.add_argument("--hold", default="k1", help="keys the user holds: k1, k2, k1,k2 or none")
    pr.add_argument("--use", default=None, help="key concatenated to the ID (default: random held key)")
    pr.add_argument("--declare", default=None, help="key id declared at verification")
    pr.add_argument("--snr", type=_snr, default=math.inf)
    decision_flags(pr)
    pr.set_defaults(func=cmd_protocol)

    x = sub.add_parser("exp", help="statistical experiments")
    _add_common(x)
    _add_challenge(x)
    x.add_argument("kind", choices=["inner", "intra", "inter", "fpfn", "fake-id"])
    x.add_argument("--reps", type=int, default=100)
    x.add_argument("--snr", type=lambda v: [_snr(t) for t in v.split(",")], default=[0.0])
    x.add_argument("--gamma", type=_floats, default=None)
    x.add_argument("--m-u", type=float, default=None)
    x.add_argument("--m-v", type=float, default=None)
    x.add_argument("--key", default=None)
    x.add_argument("--key-mode", choices=["shared", "per-fiber"], default="shared")
    x.add_argument("--length-m", type=float, default=PIGTAIL_LENGTH_M)
    x.add_argument("--span-length-m", type=float, default=SPAN_LENGTH_M)
    x.add_argument("--density", type=float, default=DENSITY_PER_M)
    x.add_argument("--genuine", type=int, default=200)
    x.add_argument("--fake", type=int, default=25)
    x.set_defaults(func=cmd_exp)

    ex = sub.add_parser("export").add_subparsers(dest="action", required=True, parser_class=_Parser)
    q = ex.add_parser("qr", help="write an ID as a plain PBM image")
    _add_common(q)
    q.add_argument("--sig")
    q.set_defaults(func=cmd_export_qr)
    return p


def _leaf_parsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                yield sub
                yield from _leaf_parsers(sub)


def _apply_config(parser, path):
    """Config values become defaults; explicit flags still win."""
    with open(path, encoding="utf-8") as fh:
        cfg = parse_config(fh.read())
    for p in [parser, *_leaf_parsers(parser)]:
        for action in p._actions:
            if action.dest in cfg and action.option_strings:
                action.default = cfg[action.dest]  # strings pass through the action's type
                action.required = False


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    try:
        if known.config:
            _apply_config(parser, known.config)
    except (OSError, ParseError) as exc:
        print(f"opufid: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args = parser.parse_args(argv)
    try:
        if getattr(args, "reps", 1) < 1:
            raise UsageError("--reps must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"opufid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OpufidError as exc:
        print(f"opufid: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
