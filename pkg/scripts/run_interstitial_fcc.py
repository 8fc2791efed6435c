#!/usr/bin/env python3
"""3D experiment: octahedral interstitial in an fcc crystal under a tapered
Morse pair potential.  The reference cell (N = 20, ~768k degrees of freedom)
makes this the long run of the set: expect tens of minutes.  Slopes should
come out near -3 (sup) and -1.5 (l2)."""
import argparse
import json
import pathlib
import sys
import time

from ldlab.cli import main

HERE = pathlib.Path(__file__).resolve().parent
DEFAULT_CONFIG = HERE.parent / "configs" / "fcc_octahedral.json"


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(DEFAULT_CONFIG))
    ap.add_argument("--out", default="runs/interstitial_fcc")
    args = ap.parse_args(argv)

    t0 = time.monotonic()
    rc = main(["study", "--config", args.config, "--out", args.out,
               "--deterministic"])
    if rc != 0:
        return rc
    print(f"\ntotal wall time: {time.monotonic() - t0:.0f}s")

    with open(pathlib.Path(args.out) / "results.json") as f:
        payload = json.load(f)
    for name, fit in payload["study"]["slopes"].items():
        print(f"  p = {name:>3}: N^{fit['slope']:+.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
