#!/usr/bin/env python3
"""Run the acceptance suite and print one PASS/FAIL line per criterion."""

import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def main():
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           str(ROOT / "tests" / "test_acceptance.py")], cwd=ROOT, capture_output=True, text=True)
    lines = [ln for ln in proc.stdout.splitlines() if ln.startswith("criterion ")]
    for ln in sorted(set(lines), key=lambda s: int(s.split()[1].rstrip(":"))):
        print(ln)
    if not lines:
        print(proc.stdout[-4000:], proc.stderr[-4000:], sep="\n")
    return proc.returncode


if __name__ == "__main__":
    sys.exit(main())
