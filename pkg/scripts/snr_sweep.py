"""Mean intra-HD of the direct pigtail ID versus SNR, with the sign-flip prediction.

For a Gaussian-like trace plus independent Gaussian noise the correlation between
clean and noisy samples is rho = sqrt(snr / (1 + snr)); a 1-bit quantizer then
flips a bit with probability arccos(rho) / pi.
"""
import argparse
import math

import numpy as np

from opufid.decision_stats import intra_hd
from opufid.fiber_model import synthesize_fiber
from opufid.ofdr import Challenge, acquire
from opufid.signature import make_signature_direct


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--snr", default="-5,0,2,4,6,10,20")
    ap.add_argument("--reps", type=int, default=50)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default="snr_sweep.csv")
    args = ap.parse_args()

    ch = Challenge()
    fiber = synthesize_fiber(0.5, 1000, args.seed)
    key = np.random.default_rng(args.seed).integers(0, 2, 96)
    ref = make_signature_direct(acquire(fiber, ch), key)
    lines = ["snr_db,mean_intra_hd,fraction_of_data_bits,predicted_fraction"]
    for snr in (float(s) for s in args.snr.split(",")):
        probes = [make_signature_direct(acquire(fiber, ch, snr, 10_000 + r), key) for r in range(args.reps)]
        mean = intra_hd(ref, probes).values.mean()
        lin = 10 ** (snr / 10)
        pred = math.acos(math.sqrt(lin / (1 + lin))) / math.pi
        lines.append(f"{snr:.9g},{mean:.9g},{mean / ch.n_samples:.9g},{pred:.9g}")
        print(lines[-1])
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
