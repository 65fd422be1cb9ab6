#!/usr/bin/env python3
"""Product pipeline demo: reduce a generic seed onto the split determinant-one
set, in measure mode (composed laminate + tail CSV) and optionally map mode.

Artifacts land in --outdir and are byte-identical across reruns.
"""

import argparse
import pathlib

from lamstair import serialize
from lamstair.cli import main as cli_main


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--outdir", default="out/product", type=pathlib.Path)
    ap.add_argument("--beta-tol", default="1e-4")
    ap.add_argument("--map-depth", type=int, default=0,
                    help="also run map mode at this recursion depth (0 = skip)")
    args = ap.parse_args()
    args.outdir.mkdir(parents=True, exist_ok=True)

    seed = args.outdir / "seed.json"
    serialize.dump_json({"rows": 2, "cols": 2,
                         "entries": [[1.0, 1.0], [0.0, 1.0]]}, seed)

    rc = cli_main(["pipeline", "product", "--n", "1", "--A", str(seed),
                   "--mode", "measure", "--beta-tol", args.beta_tol,
                   "--out", str(args.outdir / "measure.json"),
                   "--tails", str(args.outdir / "tails.csv"),
                   "--report", str(args.outdir / "report.json")])
    print(f"measure mode exit {rc}")

    if args.map_depth > 0:
        rc = cli_main(["pipeline", "product", "--n", "1", "--A", str(seed),
                       "--mode", "map", "--depth", str(args.map_depth),
                       "--out", str(args.outdir / "map.json"),
                       "--report", str(args.outdir / "map_report.json")])
        print(f"map mode (depth {args.map_depth}) exit {rc}")


if __name__ == "__main__":
    main()
