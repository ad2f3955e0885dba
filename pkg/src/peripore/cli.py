"""Command line entry points: run, validate, probe.

Exit codes: 0 success, 2 validation failure, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import sys

from .core import NonConvergenceError
from .io import ProblemFormatError, load_problem, probe_snapshot
from .solver import run as run_simulation


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="peripore",
        description="Meshfree simulator for coupled deformation, "
                    "unsaturated flow, and fracture in porous media.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a problem deck")
    p_run.add_argument("problem")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--dt", type=float, default=None)
    p_run.add_argument("--steps", type=int, default=None)
    p_run.add_argument("--stab", type=float, default=None,
                       help="override the stabilization parameter G")
    p_run.add_argument("--progress", action="store_true")

    p_val = sub.add_parser("validate", help="validate a problem deck")
    p_val.add_argument("problem")

    p_probe = sub.add_parser("probe", help="query a snapshot field")
    p_probe.add_argument("snapshot")
    p_probe.add_argument("--point-at", required=True,
                         help="x,y,z of the query location")
    p_probe.add_argument("--field", required=True,
                         choices=["pw", "sr", "porosity", "damage", "u", "v",
                                  "sigma_eff", "interface"])

    args = parser.parse_args(argv)

    if args.command == "validate":
        try:
            load_problem(args.problem)
        except ProblemFormatError as err:
            print(f"INVALID: {err}", file=sys.stderr)
            return 2
        print("ok")
        return 0

    if args.command == "run":
        try:
            problem = load_problem(args.problem)
        except ProblemFormatError as err:
            print(f"INVALID: {err}", file=sys.stderr)
            return 2
        try:
            result = run_simulation(
                problem, out_dir=args.out, dt=args.dt, steps=args.steps,
                stab=args.stab, progress=args.progress,
            )
        except NonConvergenceError as err:
            print(f"NON-CONVERGENCE: {err}", file=sys.stderr)
            if args.out:
                print(f"partial outputs (if any) in {args.out}",
                      file=sys.stderr)
            return 3
        print(f"completed {len(result.reports)} steps, "
              f"t = {result.reports[-1].time:.6g} s")
        return 0

    if args.command == "probe":
        point = [float(x) for x in args.point_at.split(",")]
        idx, pos, value = probe_snapshot(args.snapshot, point, args.field)
        pos_str = ",".join(f"{x:.6g}" for x in pos)
        print(f"point {idx} at ({pos_str}): {args.field} = {value}")
        return 0

    return 0


if __name__ == "__main__":
    sys.exit(main())
