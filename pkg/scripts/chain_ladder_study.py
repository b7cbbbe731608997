"""Fitted chain rate against the predicted rate on several epsilon ladders.

Shows how far down in epsilon the chain window measure has to go before the
log-miss slope settles on the profile prediction.
"""
import argparse
import csv
import sys

import numpy as np

from resonance_lab.action import EnergyProfile
from resonance_lab.chain import ChainSpec, chain_rate_fit

LADDERS = {
    "acceptance": [0.25, 0.2, 0.15, 0.12],
    "mid": [0.08, 0.06, 0.04, 0.03],
    "small": [0.01, 0.0075, 0.005],
    "tiny": [0.002, 0.0015, 0.001],
}


def sinusoid(s):
    return 1.0 + 0.5 * np.cos(2 * np.pi * np.asarray(s, dtype=float))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mu", type=float, default=0.9)
    ap.add_argument("--h", type=float, default=0.1)
    ap.add_argument("--lag", type=float, default=0.5)
    args = ap.parse_args()
    em = EnergyProfile.from_function(sinusoid, M=512)
    ep = EnergyProfile.from_function(lambda s: sinusoid(np.asarray(s) + args.lag), M=512, basin="+")
    spec = ChainSpec(em, ep, args.lag, 0.25, args.mu)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["ladder", "epsilons", "slope", "predicted", "relative_error"])
    for name, eps in LADDERS.items():
        fit = chain_rate_fit(spec, args.h, eps)
        w.writerow([name, " ".join(map(repr, eps)), repr(fit.slope), repr(fit.predicted), repr(fit.relative_error)])


if __name__ == "__main__":
    main()
