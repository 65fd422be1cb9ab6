#!/usr/bin/env python3
"""Approximate-solution sequence at the rank-one seed (e1+e2) (x) e1.

Prints the per-step error moments, distance floors to the two split
components, and measured tail exponents; writes the full report JSON.
"""

import argparse
import pathlib

import numpy as np

from lamstair import serialize, stages


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--outdir", default="out/approx", type=pathlib.Path)
    ap.add_argument("--j-max", type=int, default=4)
    args = ap.parse_args()
    args.outdir.mkdir(parents=True, exist_ok=True)

    A = np.outer([1.0, 1.0], [1.0, 0.0])
    steps = stages.approximate_sequence(A, j_max=args.j_max)
    print(" j    s    error_moment   dist_L1  dist_L2  tail_slope")
    for s in steps:
        print(f"{s.j:2d} {s.s:4.1f}  {s.error_moment:12.5e}  "
              f"{s.dist_L1:7.4f}  {s.dist_L2:7.4f}  {s.tail_slope:+.4f}")
    serialize.dump_json(
        {"steps": [{"j": s.j, "s": s.s, "error_moment": s.error_moment,
                    "dist_L1": s.dist_L1, "dist_L2": s.dist_L2,
                    "tail_slope": s.tail_slope, "fitted_M": s.fitted_M}
                   for s in steps]},
        args.outdir / "report.json")
    print(f"wrote {args.outdir / 'report.json'}")


if __name__ == "__main__":
    main()
