import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opufid import crp_db
from opufid.crp_db import CrpDatabase, dual_databases, enroll, lookup
from opufid.errors import ConflictError, ParseError
from opufid.ofdr import Challenge
from opufid.signature import DigitalSignature

C1 = Challenge()


def rand_sig(seed, side=8, scheme="direct"):
    return DigitalSignature(np.random.default_rng(seed).integers(0, 2, (side, side)), scheme)


def flip(sig, n, seed=0):
    flat = sig.flat().copy()
    idx = np.random.default_rng(seed).choice(flat.size, n, replace=False)
    flat[idx] ^= 1
    return DigitalSignature(flat.reshape(sig.shape), sig.scheme)


def populated(n=5, side=8):
    db = CrpDatabase("D0")
    for i in range(n):
        enroll(db, f"fiber-{i}", C1, rand_sig(i, side))
    return db


def test_enroll_into_empty():
    db = CrpDatabase("D0")
    rid = enroll(db, "a", C1, rand_sig(1))
    assert len(db) == 1 and rid == "D0-000001"
    assert db.get(rid).subsystem_label == "a"


def test_duplicate_label_challenge_conflicts():
    db = CrpDatabase("D0")
    enroll(db, "a", C1, rand_sig(1))
    with pytest.raises(ConflictError):
        enroll(db, "a", C1, rand_sig(2))
    # same label under another challenge is fine
    enroll(db, "a", C1.with_id("C2"), rand_sig(2))
    assert len(db) == 2


def test_two_hundred_records():
    db = CrpDatabase("D0")
    ids = [enroll(db, f"id-{i}", C1, rand_sig(i, 10)) for i in range(200)]
    assert len(set(ids)) == 200
    for i, rid in enumerate(ids):
        assert db.get(rid).response.same_bits(rand_sig(i, 10))


def test_exact_probe_matches_with_zero_hd():
    db = populated()
    res = lookup(db, rand_sig(3))
    assert res.matched and res.best_hd == 0
    assert db.get(res.best_record_id).subsystem_label == "fiber-3"


def test_empty_database_is_no_match():
    res = lookup(CrpDatabase("D0"), rand_sig(1))
    assert res.outcome == "no_match" and res.best_record_id is None


def test_ambiguous_when_two_within_threshold():
    db = CrpDatabase("D0")
    base = rand_sig(1)
    enroll(db, "a", C1, base)
    enroll(db, "b", C1, flip(base, 2))
    res = lookup(db, base, t=5)
    assert res.outcome == "ambiguous" and res.n_within == 2


def test_shape_mismatch_skipped():
    db = populated(3)
    enroll(db, "big", C1, rand_sig(99, 9))
    res = lookup(db, rand_sig(0))
    assert res.n_skipped == 1 and res.n_compared == 3


def test_genuine_and_fake_probes():
    side = 32
    db = CrpDatabase("D0")
    for i in range(200):
        enroll(db, f"id-{i}", C1, rand_sig(i, side))
    t = db.default_threshold(side * side)
    results = [lookup(db, flip(rand_sig(i, side), 40, i), t) for i in range(200)]
    assert all(r.matched and r.n_within == 1 for r in results)
    fakes = [lookup(db, rand_sig(10_000 + i, side), t) for i in range(25)]
    assert all(r.outcome == "no_match" for r in fakes)


def test_round_trip(tmp_path):
    db = CrpDatabase("D1", db_key=np.tile([1, 0, 1, 1], 24))
    enroll(db, "a", C1, rand_sig(1), key_id="k1")
    enroll(db, "b", Challenge(challenge_id="gated", window_start_m=0.1, window_end_m=0.3), rand_sig(2))
    enroll(db, "c", C1, rand_sig(3, 5, "intersection"))
    path = tmp_path / "db.txt"
    crp_db.save(db, path)
    back = crp_db.load(path)
    assert back == db
    assert back.get("D1-000002").challenge.window_end_m == 0.3
    assert crp_db.to_text(back) == path.read_text()


def test_persist_on_enroll(tmp_path):
    db = CrpDatabase("D0", path=str(tmp_path / "db.txt"))
    enroll(db, "a", C1, rand_sig(1))
    assert len(crp_db.load(tmp_path / "db.txt")) == 1


def test_wrong_header(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("opufid-sig v1\nkey -\n")
    with pytest.raises(ParseError) as err:
        crp_db.load(p)
    assert err.value.line == 1


def test_version_mismatch():
    with pytest.raises(ParseError):
        crp_db.from_text("opufid-db v2 D0\nkey -\n")


def test_truncated_record_names_line(tmp_path):
    db = populated(3)
    lines = crp_db.to_text(db).splitlines()
    lines[3] = lines[3].rsplit("\t", 2)[0]
    p = tmp_path / "trunc.txt"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as err:
        crp_db.load(p)
    assert err.value.line == 4
    assert "line 4" in str(err.value)


def test_bad_hex_names_line():
    text = crp_db.to_text(populated(2))
    text = text.replace(text.splitlines()[2].split("\t")[-1], "zz")
    with pytest.raises(ParseError) as err:
        crp_db.from_text(text)
    assert err.value.line == 3


@given(st.permutations(range(6)), st.integers(0, 5), st.integers(0, 20))
@settings(max_examples=60, deadline=None)
def test_order_independence(order, target, noise):
    db = populated(6)
    probe = flip(rand_sig(target), noise, target)
    shuffled = CrpDatabase("D0", records=[db.records[i] for i in order])
    a, b = lookup(db, probe), lookup(shuffled, probe)
    assert (a.outcome, a.best_record_id, a.best_hd) == (b.outcome, b.best_record_id, b.best_hd)


@given(st.integers(0, 5), st.integers(0, 30), st.floats(0, 64), st.floats(0, 64))
@settings(max_examples=100, deadline=None)
def test_threshold_monotonicity(target, noise, t1, t2):
    lo, hi = sorted((t1, t2))
    db = populated(6)
    probe = flip(rand_sig(target), noise, target)
    if lookup(db, probe, lo).matched:
        assert lookup(db, probe, hi).outcome in ("matched", "ambiguous")


def test_dual_databases_differ_only_in_key():
    k1 = np.random.default_rng(1).integers(0, 2, 96)
    k2 = np.random.default_rng(2).integers(0, 2, 96)
    entries = [(f"u{i}", C1, np.random.default_rng(i).integers(0, 2, 4000)) for i in range(4)]
    d1, d2 = dual_databases(entries, k1, k2)
    assert len(d1) == len(d2) == 4
    for r1, r2 in zip(d1, d2):
        assert r1.subsystem_label == r2.subsystem_label and r1.challenge == r2.challenge
        assert np.array_equal(r1.response.data_bits, r2.response.data_bits)
        assert np.array_equal(r1.response.key_bits, k1) and np.array_equal(r2.response.key_bits, k2)
    assert not np.array_equal(d1.db_key, d2.db_key)
