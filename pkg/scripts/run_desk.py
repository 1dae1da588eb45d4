#!/usr/bin/env python3
"""Run every experiment at desk scale and print the trend checks.

    python3 scripts/run_desk.py [--config configs/desk.yaml] [--out-dir runs/desk] [--seed N]

Checkpoints are trained on first use and reused afterwards (keyed by the
training part of the config), so a second invocation only re-evaluates.
"""

import argparse
import sys
import time
from pathlib import Path

from fewshot_ce.cli import EXIT_ASSERT, EXIT_OK, main

ROOT = Path(__file__).resolve().parents[1]

STEPS = [
    ["generate"],
    ["eval-snr"],
    ["sweep-support"],
    ["mismatch"],
    ["separability"],
    ["switchnet"],
    ["boundary", "--with-fsl"],
]


def run(argv: list[str]) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.yaml"))
    ap.add_argument("--out-dir", default=str(ROOT / "runs" / "desk"))
    ap.add_argument("--seed", type=int, help="restrict to one seed")
    ap.add_argument("--skip", nargs="*", default=[], help="step names to skip (e.g. boundary)")
    args = ap.parse_args(argv)

    common = ["--config", args.config, "--out-dir", args.out_dir, "--prepare", "--assert"]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]
    failed = []
    for step in STEPS:
        if step[0] in args.skip:
            continue
        extra = common if step[0] != "generate" else ["--config", args.config, "--out-dir", args.out_dir]
        t0 = time.perf_counter()
        print(f"== {' '.join(step)}", flush=True)
        code = main(step + extra)
        print(f"   exit {code} after {time.perf_counter() - t0:.0f} s", flush=True)
        if code == EXIT_ASSERT:
            failed.append(step[0])
        elif code != EXIT_OK:
            sys.exit(code)
    if failed:
        print(f"trend checks failed in: {', '.join(failed)}")
        sys.exit(EXIT_ASSERT)


if __name__ == "__main__":
    run(sys.argv[1:])
