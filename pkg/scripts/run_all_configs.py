#!/usr/bin/env python3
"""Run every YAML config in configs/ through the CLI and tabulate exit codes.

Outputs land in ``runs/<config stem>`` unless ``--output-root`` is given.
"""

import argparse
import sys
from pathlib import Path

from pullback_ns.cli import main as cli_main

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--output-root", default=str(ROOT / "runs"))
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("configs", nargs="*", help="subset of configs (default: all)")
    args = ap.parse_args()
    paths = [Path(p) for p in args.configs] or sorted((ROOT / "configs").glob("*.yaml"))
    codes = {}
    for p in paths:
        print(f"== {p.name}")
        codes[p.name] = cli_main(["--workers", str(args.workers), "run", str(p),
                                  "--output-dir", str(Path(args.output_root) / p.stem)])
    print("\nconfig exit codes (0 pass, 2 negative verdict, 1 error):")
    for name, code in codes.items():
        print(f"  {name}: {code}")
    return max(codes.values(), default=0)


if __name__ == "__main__":
    sys.exit(main())
