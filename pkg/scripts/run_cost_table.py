#!/usr/bin/env python3
"""Emit the full 6x4 mixer cost grid (params in K, MACs in M).

Usage:
    python scripts/run_cost_table.py [--json table.json]
"""

import argparse
import json
from pathlib import Path

from hafformer.analysis import emit_cost_table
from hafformer.mixers import ALL_MIXER_COMBOS


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--json", metavar="PATH", help="also write machine-readable rows")
    args = parser.parse_args()
    table = emit_cost_table(list(ALL_MIXER_COMBOS))
    print(table.text)
    if args.json:
        Path(args.json).write_text(json.dumps(list(table.rows), indent=2) + "\n")
        print(f"wrote {args.json}")


if __name__ == "__main__":
    main()
