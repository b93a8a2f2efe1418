"""Command line front end.

    python -m gaussres run FILE [--output DIR] [--workers N]
    python -m gaussres preset NAME [--dir DIR]
    python -m gaussres diff A.csv B.csv --rel-tol X [--column NAME ...]
                        [--kt-min V] [--kt-max V]

Exit codes: 0 success, 2 validation error, 3 numerical failure,
4 diff tolerance exceeded.
"""

import argparse
import sys

from .errors import (CheckpointError, DiffToleranceError, NumericalError,
                     ValidationError)
from . import runner


def _build_parser():
    p = argparse.ArgumentParser(prog="gaussres",
                                description="Thermal scans from imaginary-time "
                                            "variational Gaussian resolutions.")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="execute a run file")
    pr.add_argument("file", help="path to the run file")
    pr.add_argument("--output", default=None, metavar="DIR",
                    help="output directory (overrides the run file)")
    pr.add_argument("--workers", type=int, default=None, metavar="N",
                    help="parallel workers for ensemble propagation "
                         "(default: GAUSSRES_WORKERS or the CPU count)")

    pp = sub.add_parser("preset", help="write a bundled run file")
    pp.add_argument("name", help="one of: " + ", ".join(sorted(runner.presets())))
    pp.add_argument("--dir", default=".", metavar="DIR",
                    help="directory to write NAME.run into")

    pd = sub.add_parser("diff", help="compare two scan tables column by column")
    pd.add_argument("a", help="first CSV table")
    pd.add_argument("b", help="second CSV table")
    pd.add_argument("--rel-tol", type=float, required=True,
                    help="maximum allowed relative deviation per column")
    pd.add_argument("--column", action="append", default=None, metavar="NAME",
                    help="restrict the comparison to this column (repeatable)")
    pd.add_argument("--kt-min", type=float, default=None,
                    help="ignore rows with kT below this value")
    pd.add_argument("--kt-max", type=float, default=None,
                    help="ignore rows with kT above this value")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            result = runner.run(args.file, outdir=args.output,
                                n_workers=args.workers)
            for name in result.outputs:
                print(f"wrote {result.outdir}/{name}")
        elif args.command == "preset":
            path = runner.write_preset(args.name, args.dir)
            print(f"wrote {path}")
        elif args.command == "diff":
            report = runner.diff(args.a, args.b, args.rel_tol,
                                 columns=args.column, kt_min=args.kt_min,
                                 kt_max=args.kt_max)
            for line in report.lines():
                print(line)
            if not report.passed:
                return 4
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, CheckpointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except DiffToleranceError as exc:
        print(f"diff failed: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
