"""Network path IDs: genuine/fake separation and span-replacement sessions.

Writes fake-ID confusion counts (through the CLI) and a per-protocol table of
session outcomes when one span of an enrolled chain is swapped for another fiber.
"""
import argparse
import collections
import os

from opufid.cli import main as cli
from opufid.crp_db import CrpDatabase
from opufid.fiber_model import concatenate, synthesize_fiber
from opufid.ofdr import Challenge
from opufid.protocols import enroll_path, protocol1_two_subsystems, protocol2_cascaded, protocol3_cascaded

RUNNERS = {1: protocol1_two_subsystems, 2: protocol2_cascaded, 3: protocol3_cascaded}


def chain(seeds):
    return concatenate([synthesize_fiber(0.6, 1000, s) for s in seeds])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/path")
    ap.add_argument("--sessions", type=int, default=100)
    ap.add_argument("--skip-fake-id", action="store_true")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    if not args.skip_fake_id:
        cli(["exp", "fake-id", "--genuine", "200", "--fake", "25", "--out", args.out])

    ch = Challenge()
    db = CrpDatabase("PATH")
    base = {1: [101, 102], 2: [201, 202, 203], 3: [201, 202, 203]}
    for p, seeds in base.items():
        enroll_path(db, f"p{p}", chain(seeds), ch, p)
    rows = ["protocol,replaced_span,outcome,count"]
    for p, runner in RUNNERS.items():
        counts = collections.Counter()
        for s in range(args.sessions):
            seeds = list(base[p])
            span = s % len(seeds)
            seeds[span] = 50_000 + s
            counts[(span, runner(chain(seeds), ch, None, db, label=f"p{p}").outcome)] += 1
        for (span, outcome), n in sorted(counts.items()):
            rows.append(f"{p},{span},{outcome},{n}")
    with open(os.path.join(args.out, "span_replacement.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    print("\n".join(rows))


if __name__ == "__main__":
    main()
