"""Command-line entry points for the two figure kinds."""

from __future__ import annotations

import argparse
import sys

from .figures import plot_before_after, plot_trajectories
from .io import NetworkMismatch, SchemaError, TraceFrame, load_result


def main_trace(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot_trace",
        description="Plot selection/flow/toll trajectories from a trace.csv",
    )
    parser.add_argument("trace", help="trace.csv produced by toll-dag simulate")
    parser.add_argument("--ref", help="result.json with the reference operating point")
    parser.add_argument("--out", required=True, help="output figure path (.png/.svg)")
    args = parser.parse_args(argv)
    try:
        trace = TraceFrame.read_csv(args.trace)
        result = load_result(args.ref) if args.ref else None
        plot_trajectories(trace, args.out, result=result)
    except (SchemaError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main_before_after(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot_before_after",
        description="Paired per-arc flow bars from two result.json files",
    )
    parser.add_argument("before", help="result.json of the untolled solve")
    parser.add_argument("after", help="result.json of the tolled solve")
    parser.add_argument("--out", required=True, help="output figure path (.png/.svg)")
    args = parser.parse_args(argv)
    try:
        plot_before_after(load_result(args.before), load_result(args.after), args.out)
    except (NetworkMismatch, SchemaError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
