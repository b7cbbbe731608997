"""Predicted and chain rates across the resonance interval, with the argmin of each."""
import argparse
import json

import numpy as np

from resonance_lab.action import EnergyProfile
from resonance_lab.chain import compare_resonance
from resonance_lab.resonance import find_resonance_point, resonance_interval


def sinusoid(s):
    return 1.0 + 0.5 * np.cos(2 * np.pi * np.asarray(s, dtype=float))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--h", type=float, default=0.1)
    ap.add_argument("--points", type=int, default=21)
    ap.add_argument("--chain-epsilons", type=float, nargs="+", default=[0.002, 0.0015, 0.001])
    args = ap.parse_args()
    em = EnergyProfile.from_function(sinusoid, M=512)
    ep = EnergyProfile.from_function(lambda s: sinusoid(np.asarray(s) + 0.5), M=512, basin="+")
    interval = resonance_interval(em, ep)
    mus = np.linspace(interval.lower, interval.upper, args.points + 2)[1:-1]
    report = compare_resonance(em, ep, 0.5, mus, args.h, args.chain_epsilons)
    rp = find_resonance_point(em, ep, hs=(args.h,))
    report["refined_mu_R"] = float(rp.mu_r[0])
    print(json.dumps(report, indent=2, default=float))


if __name__ == "__main__":
    main()
