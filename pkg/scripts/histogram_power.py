"""Power of the binned log-ratio test against a mechanism run at 2x epsilon.

Noise is drawn with 2*eps around two centres beta apart and tested against
budget eps. Reports the verdict for each (samples, bins) cell, plus the
true-eps verdict as a size check.
"""

import argparse
import itertools

import numpy as np

from piobf.bench import build_world
from piobf.core import PrivacyParams
from piobf.rng import derive_key, make_rng
from piobf.verifier import NoiseOnCenters, empirical_pi_histogram_test


def run(mult, p, n, bins, rep):
    y0 = np.zeros(p.k)
    y1 = y0.copy()
    y1[0] = p.beta_adj
    mech = NoiseOnCenters(lambda v: v, p.with_epsilon(mult * p.epsilon))
    return empirical_pi_histogram_test(mech, y0, y1, p, n, bins, make_rng(rep, derive_key("p", n, bins)),
                                       make_rng(rep, derive_key("q", n, bins)))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--k", type=int, default=16)
    ap.add_argument("--samples", type=int, nargs="+", default=[10**4, 10**5, 10**6])
    ap.add_argument("--bins", type=int, nargs="+", default=[20, 50, 100, 200])
    ap.add_argument("--reps", type=int, default=3)
    args = ap.parse_args()

    beta = build_world().beta
    p = PrivacyParams(1.0, args.k, 0.5, beta)
    print(f"k={args.k} beta={beta:.4f} budget={p.epsilon * beta:.4f}")
    print(f"{'samples':>9} {'bins':>5}  {'2x detected':>11}  {'1x passed':>9}  max|lr| (2x)")
    for n, b in itertools.product(args.samples, args.bins):
        neg = [run(2.0, p, n, b, r) for r in range(args.reps)]
        pos = [run(1.0, p, n, b, r) for r in range(args.reps)]
        det = sum(v.status == "fail" for v in neg)
        ok = sum(v.status == "pass" for v in pos)
        lr = max(v.details.get("max_log_ratio", float("nan")) for v in neg)
        print(f"{n:>9} {b:>5}  {det:>6}/{args.reps:<4}  {ok:>4}/{args.reps:<4}  {lr:.3f}")


if __name__ == "__main__":
    main()
