"""Equilibrium counts of the single autocatalytic reaction across feed splits.

For fixed k and total feed M = c1f + c2f, sweeps c2f and compares the number
of positive equilibria with the kM > 3 threshold rule.  Writes CSV to stdout.
"""
import argparse
import csv
import sys

import numpy as np

from vrclf import reaction_network as rn


def sweep(k: float, M: float, points: int):
    for c2f in np.linspace(M / points, M * (1 - 1 / points), points - 1):
        rep = rn.example51_roots(k, M - c2f, c2f)
        yield c2f, rep.count, rep.threshold_rule


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--k", type=float, default=1.0)
    ap.add_argument("--M", type=float, default=4.0)
    ap.add_argument("--points", type=int, default=400)
    args = ap.parse_args()
    w = csv.writer(sys.stdout)
    w.writerow(["c2f", "count", "threshold_rule"])
    for c2f, count, rule in sweep(args.k, args.M, args.points):
        w.writerow([f"{c2f:.6g}", count, rule])
