#!/usr/bin/env python3
"""Periodic Green's function convergence for the scalar nearest-neighbor
Laplacian on Z^2: j-th difference sup errors against a large-cell proxy,
expected to shrink like N^{-j} in d = 2."""
import argparse
import json
import pathlib
import sys

from ldlab.cli import main

HERE = pathlib.Path(__file__).resolve().parent
DEFAULT_CONFIG = HERE.parent / "configs" / "square_laplacian_greens.json"


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(DEFAULT_CONFIG))
    ap.add_argument("--out", default="runs/greens_rates")
    args = ap.parse_args(argv)

    rc = main(["greens", "--config", args.config, "--out", args.out])
    if rc != 0:
        return rc
    with open(pathlib.Path(args.out) / "greens.json") as f:
        payload = json.load(f)
    for j, rec in payload["study"]["per_j"].items():
        rows = ", ".join(f"N={n}: {e:.3e}" for n, e in rec["errors"])
        print(f"j = {j}: slope {rec['fit']['slope']:+.3f}   [{rows}]")
    return 0


if __name__ == "__main__":
    sys.exit(run())
