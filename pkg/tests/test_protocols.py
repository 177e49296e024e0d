import numpy as np
import pytest

from opufid import crp_db
from opufid.crp_db import CrpDatabase, dual_databases
from opufid.decision_stats import intra_hd
from opufid.fiber_model import concatenate, synthesize_fiber
from opufid.ofdr import Challenge, acquire, quantize
from opufid.protocols import (
    PROTOCOL4_STEPS,
    Channel,
    Party,
    SessionTranscript,
    default_windows,
    direct_id,
    enroll_path,
    identify_subsystem,
    protocol1_two_subsystems,
    protocol2_cascaded,
    protocol3_cascaded,
    protocol4_cn_assisted,
    protocol_step_names,
)

RUNNERS = {1: protocol1_two_subsystems, 2: protocol2_cascaded, 3: protocol3_cascaded}


def chain_of(*seeds):
    return concatenate([synthesize_fiber(0.6, 1000, s) for s in seeds])


@pytest.fixture(scope="module")
def access_db(pigtail, challenge, key96):
    db = CrpDatabase("D0", db_key=key96)
    crp_db.enroll(db, "user1", challenge, direct_id(pigtail, challenge, key96))
    for s in range(100, 105):
        f = synthesize_fiber(0.5, 1000, s)
        crp_db.enroll(db, f.fiber_id, challenge, direct_id(f, challenge, key96))
    return db


@pytest.fixture(scope="module")
def path_db(two_span_chain, three_span_chain, challenge):
    db = CrpDatabase("P")
    enroll_path(db, "path2", two_span_chain, challenge, 1)
    enroll_path(db, "path3", three_span_chain, challenge, 2)
    enroll_path(db, "path3", three_span_chain, challenge, 3)
    return db


def _steps_ok(tr, names):
    return [s[2].split(":", 1)[0] for s in tr.steps] == names and tr.step_labels == [
        str(i + 1) for i in range(len(names))]


# --- direct identification -----------------------------------------------------------

def test_direct_noiseless(pigtail, challenge, access_db):
    tr = identify_subsystem(Party("central_node"), Party("user", pigtail, label="user1"), challenge, access_db)
    assert tr.outcome == "identified" and tr.counters["best_hd"] == 0
    assert tr.step_labels == ["acquire", "sign", "lookup"]
    assert tr.exit_code == 0


def test_direct_snr0_monte_carlo(pigtail, challenge, key96, access_db):
    ref = direct_id(pigtail, challenge, key96)
    calib = intra_hd(ref, [direct_id(pigtail, challenge, key96, 0.0, 10_000 + s) for s in range(20)])
    db = CrpDatabase("D0", key96, list(access_db.records), m_u=float(calib.values.mean()), m_v=2048.0)
    user = Party("user", pigtail, label="user1")
    wins = sum(identify_subsystem(Party("central_node"), user, challenge, db, 0.0, seed).identified
               for seed in range(100))
    assert wins >= 99


def test_substituted_fiber_rejected(challenge, access_db):
    fake = Party("adversary", synthesize_fiber(0.5, 1000, 999), label="user1")
    tr = identify_subsystem(Party("central_node"), fake, challenge, access_db)
    assert tr.outcome == "rejected" and tr.exit_code == 2


def test_unenrolled_label_fails(challenge, access_db):
    tr = identify_subsystem(Party("central_node"), Party("user", synthesize_fiber(0.5, 1000, 998), label="x"),
                            challenge, access_db)
    assert tr.outcome == "failed:not-enrolled" and tr.exit_code == 3


def test_empty_gate_fails_acquisition(pigtail, access_db):
    gated = Challenge(window_start_m=1.5, window_end_m=1.9)
    tr = identify_subsystem(Party("central_node"), Party("user", pigtail, label="user1"), gated, access_db,
                            snr_db=0.0, seed=1)
    assert tr.outcome == "failed:acquisition"


def test_channel_hook_replaces_challenge(pigtail, challenge, access_db):
    other = Challenge(sweep_rate_hz_per_s=challenge.sweep_rate_hz_per_s * 1.37)
    hook = lambda kind, s, r, payload: other if kind == "challenge" else None
    tr = identify_subsystem(Party("central_node"), Party("user", pigtail, label="user1"), challenge, access_db,
                            channel=Channel(hook))
    assert tr.outcome == "rejected"


# --- path protocols --------------------------------------------------------------------

def test_protocol1_genuine(two_span_chain, challenge, path_db):
    tr = protocol1_two_subsystems(two_span_chain, challenge, None, path_db, label="path2")
    assert tr.outcome == "identified" and tr.counters["best_hd"] == 0
    assert _steps_ok(tr, protocol_step_names(1))


@pytest.mark.parametrize("protocol", [2, 3])
def test_cascaded_genuine(protocol, three_span_chain, challenge, path_db):
    tr = RUNNERS[protocol](three_span_chain, challenge, None, path_db, label="path3")
    assert tr.outcome == "identified"
    assert _steps_ok(tr, protocol_step_names(protocol))


def test_protocol2_and_3_ids_differ(path_db):
    r2 = [r for r in path_db if r.challenge.challenge_id.endswith("/p2")][0]
    r3 = [r for r in path_db if r.challenge.challenge_id.endswith("/p3")][0]
    assert not r2.response.same_bits(r3.response)


@pytest.mark.parametrize("protocol,span", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_replaced_span_rejected(protocol, span, two_span_chain, three_span_chain, challenge, path_db):
    base = [11, 12] if protocol == 1 else [21, 22, 23]
    label = "path2" if protocol == 1 else "path3"
    for s in range(25):
        seeds = list(base)
        seeds[span] = 5000 + s
        tr = RUNNERS[protocol](chain_of(*seeds), challenge, None, path_db, label=label)
        assert tr.outcome in ("rejected", "failed:insufficient-entropy"), (s, tr.outcome)
        assert not tr.identified


def test_windows_out_of_range(two_span_chain, challenge, path_db):
    tr = protocol1_two_subsystems(two_span_chain, challenge, [(0.1, 0.26), (1.9, 0.26)], path_db)
    assert tr.outcome == "failed:out-of-range"
    assert tr.exit_code == 3


def test_protocol2_empty_j1(challenge):
    # identical windows: S1 and S2 coincide, so J1 is empty
    chain = chain_of(31, 32, 33)
    w = default_windows(chain)
    tr = protocol2_cascaded(chain, challenge, [w[0], w[0], w[2]], CrpDatabase("P"))
    assert tr.outcome == "failed:insufficient-entropy"


# --- protocol 4 --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def dual(challenge):
    k1 = np.random.default_rng(101).integers(0, 2, 96).astype(np.uint8)
    k2 = np.random.default_rng(102).integers(0, 2, 96).astype(np.uint8)
    fibers = [synthesize_fiber(0.5, 1000, 300 + i) for i in range(4)]
    entries = [(f.fiber_id, challenge, quantize(acquire(f, challenge), 1).levels) for f in fibers]
    d1, d2 = dual_databases(entries, k1, k2)
    return fibers, k1, k2, d1, d2


def test_protocol4_genuine(dual, challenge):
    fibers, k1, k2, d1, d2 = dual
    user = Party("user", fibers[0], {"k1": k1}, label=fibers[0].fiber_id)
    tr = protocol4_cn_assisted(Party("central_node"), user, d1, d2, challenge, "k1", seed=5)
    assert tr.outcome == "identified"
    assert tr.step_labels == PROTOCOL4_STEPS
    assert "match in D1" in tr.steps[6][2]


def test_protocol4_random_key_choice(dual, challenge):
    fibers, k1, k2, d1, d2 = dual
    user = Party("user", fibers[1], {"k1": k1, "k2": k2})
    outcomes = {protocol4_cn_assisted(Party("central_node"), user, d1, d2, challenge, seed=s).outcome
                for s in range(10)}
    assert outcomes == {"identified"}


def test_protocol4_adversary_without_key(dual, challenge):
    fibers, k1, k2, d1, d2 = dual
    adv = Party("adversary", fibers[2])
    tr = protocol4_cn_assisted(Party("central_node"), adv, d1, d2, challenge, seed=3)
    assert tr.outcome == "rejected:key-mismatch" and tr.exit_code == 2


def test_protocol4_unknown_fiber(dual, challenge):
    fibers, k1, k2, d1, d2 = dual
    user = Party("user", synthesize_fiber(0.5, 1000, 777), {"k1": k1})
    tr = protocol4_cn_assisted(Party("central_node"), user, d1, d2, challenge, "k1", seed=1)
    assert tr.outcome == "failed:identification"
    assert tr.step_labels == ["1", "2", "3", "4", "5", "6", "6b"]


@pytest.mark.parametrize("held", [("k1",), ("k1", "k2")])
def test_protocol4_key_necessity(held, dual, challenge):
    fibers, k1, k2, d1, d2 = dual
    keys = {"k1": k1, "k2": k2}
    user = Party("user", fibers[3], {k: keys[k] for k in held})
    good = protocol4_cn_assisted(Party("central_node"), user, d1, d2, challenge, "k1", seed=8)
    bad = protocol4_cn_assisted(Party("central_node"), user, d1, d2, challenge, "k1", seed=8,
                                declared_key_id="k2")
    assert good.outcome == "identified" and bad.outcome == "rejected:key-mismatch"


def test_protocol4_stolen_key_in_transit(dual, challenge):
    fibers, k1, k2, d1, d2 = dual
    user = Party("user", fibers[0], {"k1": k1})
    hook = lambda kind, s, r, payload: ("k1", 1 - payload[1]) if kind == "key" else None
    tr = protocol4_cn_assisted(Party("central_node"), user, d1, d2, challenge, "k1", seed=2, channel=Channel(hook))
    assert tr.outcome == "rejected:key-mismatch"


# --- session-level properties --------------------------------------------------------------

def test_outcome_set_once():
    tr = SessionTranscript("x").finish("identified")
    with pytest.raises(RuntimeError):
        tr.finish("rejected")


def test_transcript_text_format(two_span_chain, challenge, path_db, tmp_path):
    tr = protocol1_two_subsystems(two_span_chain, challenge, None, path_db, label="path2")
    lines = tr.to_text().splitlines()
    assert lines[-1] == "outcome\tidentified"
    assert all(len(line.split("\t")) == 3 for line in lines[:-1])
    tr.save(tmp_path / "t.txt")
    assert (tmp_path / "t.txt").read_text() == tr.to_text()


def test_determinism(dual, pigtail, challenge, access_db, three_span_chain, path_db):
    fibers, k1, k2, d1, d2 = dual
    user = Party("user", fibers[1], {"k1": k1, "k2": k2})
    runs = [protocol4_cn_assisted(Party("central_node"), user, d1, d2, challenge, snr_db=10.0, seed=4).to_text()
            for _ in range(2)]
    assert runs[0] == runs[1]
    direct = [identify_subsystem(Party("central_node"), Party("user", pigtail), challenge, access_db, 0.0, 9).to_text()
              for _ in range(2)]
    assert direct[0] == direct[1]
    p3 = [protocol3_cascaded(three_span_chain, challenge, None, path_db).to_text() for _ in range(2)]
    assert p3[0] == p3[1]


@pytest.mark.slow
def test_no_identification_without_enrollment(challenge, access_db, path_db, dual):
    fibers, k1, k2, d1, d2 = dual
    for s in range(100):
        seed = 20_000 + 3 * s
        pig = synthesize_fiber(0.5, 1000, seed)
        assert not identify_subsystem(Party("central_node"), Party("user", pig), challenge, access_db).identified
        assert not protocol1_two_subsystems(chain_of(seed, seed + 1), challenge, None, path_db).identified
        c3 = chain_of(seed, seed + 1, seed + 2)
        assert not protocol2_cascaded(c3, challenge, None, path_db).identified
        assert not protocol3_cascaded(c3, challenge, None, path_db).identified
        tr = protocol4_cn_assisted(Party("central_node"), Party("user", pig, {"k1": k1}), d1, d2, challenge,
                                   "k1", seed=s)
        assert not tr.identified
