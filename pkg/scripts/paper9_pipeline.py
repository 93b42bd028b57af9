#!/usr/bin/env python3
"""End-to-end benchmark run: equilibria, optimal tolls, dynamics, ODEs.

Writes untolled/tolled equilibrium results, a simulation trace, and
both ODE trajectories into the output directory, ready for the
plotting package:

    python scripts/paper9_pipeline.py --out results/paper9
    plot-before-after results/paper9/untolled/result.json \
        results/paper9/tolled/result.json --out results/paper9/flows.png
    plot-trace results/paper9/sim/trace.csv \
        --ref results/paper9/sim/result.json --out results/paper9/dynamics.png
"""

import argparse
from pathlib import Path

from tolldag.cli import ExperimentSpec, run


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--network", default="paper9")
    parser.add_argument("--out", type=Path, default=Path("results/paper9"))
    parser.add_argument("--beta", type=float, default=10.0)
    parser.add_argument("--gamma", type=float, default=0.02)
    parser.add_argument("--horizon", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    stages = [
        ("untolled", "equilibrium", {"beta": args.beta}),
        ("tolled", "optimal_toll", {"beta": args.beta}),
        ("social", "social_opt", {"beta": args.beta}),
        (
            "sim",
            "simulate",
            {
                "beta": args.beta,
                "gamma": args.gamma,
                "eta": "0,0.1",
                "horizon": args.horizon,
                "seed": args.seed,
            },
        ),
        ("ode_flow", "ode_flow", {"beta": args.beta, "t_end": 25.0, "dt": 0.01}),
        ("ode_toll", "ode_toll", {"beta": args.beta, "t_end": 3.0, "dt": 0.01}),
    ]
    for subdir, command, params in stages:
        spec = ExperimentSpec(
            network=args.network,
            command=command,
            params=params,
            output_dir=args.out / subdir,
        )
        code = run(spec)
        print(f"{command:>13} -> {args.out / subdir}  (exit {code})")
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
