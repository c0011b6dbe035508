"""figplots CLI: render one figure spec, or every committed spec."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .render import FigureSpec, render, render_all


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="figplots",
                                     description="render icllab result figures")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render figure spec(s) to images")
    p.add_argument("spec", help="figure-spec YAML, or a directory with --all")
    p.add_argument("--all", action="store_true",
                   help="treat SPEC as a directory of figure specs")
    p.add_argument("--data-dir", default="results",
                   help="root for CSV paths referenced by the spec")
    p.add_argument("--out-dir", default="figures_out")

    args = parser.parse_args(argv)
    try:
        if args.all:
            for path in render_all(args.spec, args.data_dir, args.out_dir):
                print(path)
        else:
            print(render(FigureSpec.load(args.spec), args.data_dir, args.out_dir))
        return 0
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
