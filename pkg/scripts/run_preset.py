#!/usr/bin/env python3
"""Run one benchmark row end to end: meta pipeline plus the method comparison.

Example:

    python scripts/run_preset.py --preset ip_stochastic_l --out out

Writes the meta checkpoint, the adapted checkpoint, validity/ROA artifacts and
the comparison table into <out>/<preset>/.
"""

import argparse
import sys
from pathlib import Path

from lyapcert import cli
from lyapcert.config import PRESETS


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--preset", required=True, choices=sorted(PRESETS))
    parser.add_argument("--out", default="out")
    parser.add_argument("--skip-compare", action="store_true",
                        help="only run the meta pipeline")
    args = parser.parse_args()

    base = Path(args.out) / args.preset
    steps = [["train-meta", "--preset", args.preset, "--out", args.out]]
    code = cli.main(steps[0])
    if code != 0:
        return code
    for cmd in (
        ["adapt", "--preset", args.preset, "--out", args.out,
         "--checkpoint", str(base / "meta_checkpoint.json")],
        ["verify", "--preset", args.preset, "--out", args.out,
         "--checkpoint", str(base / "adapted_checkpoint.json")],
        ["roa", "--preset", args.preset, "--out", args.out,
         "--checkpoint", str(base / "adapted_checkpoint.json")],
    ):
        code = cli.main(cmd)
        if code != 0:
            return code
    if not args.skip_compare:
        code = cli.main(["compare", "--preset", args.preset, "--out", args.out])
    return code


if __name__ == "__main__":
    sys.exit(main())
