"""Command line: fedroad-plots --kind KIND --out FIG.png metrics1.csv [...]"""

from __future__ import annotations

import argparse
import sys

from .figures import KINDS, PlotSpec, plot
from .reader import SchemaError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedroad-plots", description="Regenerate figures from metrics.csv files."
    )
    parser.add_argument("--kind", required=True, choices=KINDS)
    parser.add_argument("--out", required=True, help="output image path (.png/.svg/.pdf)")
    parser.add_argument("csvs", nargs="+", help="metrics.csv files, one per run")
    args = parser.parse_args(argv)
    try:
        result = plot(PlotSpec(csv_paths=args.csvs, kind=args.kind, out_path=args.out))
    except (SchemaError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"wrote {result.out_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
