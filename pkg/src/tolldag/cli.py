"""Experiment orchestration: networks in, solver runs out, files emitted.

Subcommands: equilibrium, social_opt, optimal_toll, simulate, ode_flow,
ode_toll, verify.  Each run writes a result.json into the output
directory; simulate additionally writes trace.csv and a config.json
sidecar carrying the full simulation configuration and the reference
operating point.

Exit codes: 0 success, 2 configuration error, 3 solver nonconvergence,
4 property-suite failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics, equilibrium, network, tolling
from .errors import (
    InvalidOptions,
    NonConvergence,
    NoRoute,
    ParseError,
    RouteExplosion,
    TollDagError,
    ValidationError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGENCE = 3
EXIT_PROPERTY_FAILURE = 4


def _affine_net(nodes, arcs, theta1, theta0, demand=1.0):
    latency = {
        arc[0]: network.AffineLatency(theta1=t1, theta0=t0)
        for arc, t1, t0 in zip(arcs, theta1, theta0)
    }
    return network.OriginalNetwork(
        nodes=tuple(nodes),
        arcs=tuple(arcs),
        origin="o",
        destination="d",
        demand=demand,
        latency=latency,
    )


def _paper9() -> network.OriginalNetwork:
    # Reconstruction of the 9-arc benchmark: 6 nodes, one bidirectional
    # pair between the central nodes 2 and 3.  Its CoDAG has 12 arcs
    # and exactly arcs a5, a6, a7 split into two copies each, matching
    # the published correspondence pattern; the exact adjacency of the
    # original figure is not recoverable, so this is a stand-in with
    # the same counts, not a claimed replica.
    arcs = [
        ("a1", "o", "2"),
        ("a2", "o", "3"),
        ("a3", "2", "3"),
        ("a4", "3", "2"),
        ("a5", "2", "1"),
        ("a6", "3", "4"),
        ("a7", "2", "d"),
        ("a8", "1", "d"),
        ("a9", "4", "d"),
    ]
    theta0 = [0, 1, 0, 1, 1, 0, 1, 1, 1]
    theta1 = [2, 1, 1, 1, 1, 1, 2, 2, 2]
    return _affine_net(["o", "1", "2", "3", "4", "d"], arcs, theta1, theta0)


BUILTIN_NETWORKS = {
    "single_arc": lambda: _affine_net(
        ["o", "d"], [("a1", "o", "d")], [2.0], [1.0]
    ),
    "parallel2": lambda: _affine_net(
        ["o", "d"], [("a1", "o", "d"), ("a2", "o", "d")], [1.0, 1.0], [0.0, 0.0]
    ),
    "parallel2_asym": lambda: _affine_net(
        ["o", "d"], [("a1", "o", "d"), ("a2", "o", "d")], [1.0, 2.0], [0.0, 0.0]
    ),
    "diamond": lambda: _affine_net(
        ["o", "1", "2", "d"],
        [
            ("a1", "o", "1"),
            ("a2", "o", "2"),
            ("a3", "1", "2"),
            ("a4", "2", "1"),
            ("a5", "1", "d"),
            ("a6", "2", "d"),
        ],
        [2.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        [0.0, 1.0, 0.0, 1.0, 1.0, 0.0],
    ),
    "paper9": _paper9,
}


def load_network(name_or_path: str) -> network.OriginalNetwork:
    """Resolve a builtin name or parse a network JSON file."""
    if name_or_path in BUILTIN_NETWORKS:
        return BUILTIN_NETWORKS[name_or_path]()
    path = Path(name_or_path)
    if not path.exists():
        raise ParseError(
            f"{name_or_path!r} is neither a builtin "
            f"({', '.join(sorted(BUILTIN_NETWORKS))}) nor an existing file"
        )
    return network.load_network_file(path)


@dataclass
class ExperimentSpec:
    network: str
    command: str
    params: dict = field(default_factory=dict)
    output_dir: Path = Path(".")


def _json_floats(values) -> list:
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(values, dtype=float)]


def _codag_block(codag: network.CoDag) -> dict:
    orig_ids = codag.net.arc_ids
    return {
        "origin": codag.origin,
        "destination": codag.destination,
        "arcs": [
            {
                "id": codag.arc_ids[k],
                "tail": codag.node_ids[codag.arc_tail[k]],
                "head": codag.node_ids[codag.arc_head[k]],
                "orig": orig_ids[codag.arc_orig[k]],
            }
            for k in range(codag.n_arcs)
        ],
    }


def _per_arc_map(codag: network.CoDag, values: np.ndarray) -> dict:
    return {aid: float(v) for aid, v in zip(codag.arc_ids, values)}


def _per_orig_map(codag: network.CoDag, values: np.ndarray) -> dict:
    return {str(aid): float(v) for aid, v in zip(codag.net.arc_ids, values)}


def _result_envelope(command: str, net: network.OriginalNetwork, codag, beta: float) -> dict:
    return {
        "command": command,
        "network": network.network_to_json(net),
        "beta": beta,
        "codag": _codag_block(codag),
    }


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")


def _equilibrium_payload(codag, res) -> dict:
    return {
        "w_codag": _per_arc_map(codag, res.w_bar.w),
        "w_orig": _per_orig_map(codag, network.aggregate_flow(codag, res.w_bar.w)),
        "xi": _per_arc_map(codag, res.xi_bar.xi),
        "potential": res.potential,
        "vi_residual": res.vi_residual,
        "fixed_point_residual": res.fixed_point_residual,
        "iterations": res.iterations,
    }


def _parse_float_list(text: str, expected: int, what: str) -> np.ndarray:
    parts = [s for s in text.split(",") if s.strip()]
    if len(parts) != expected:
        raise InvalidOptions(f"{what} needs {expected} comma-separated values, got {len(parts)}")
    try:
        return np.array([float(s) for s in parts])
    except ValueError as exc:
        raise InvalidOptions(f"bad {what} value: {exc}") from exc


def _cmd_equilibrium(spec: ExperimentSpec) -> int:
    net = load_network(spec.network)
    codag = network.build_codag(net)
    beta = spec.params.get("beta", 10.0)
    p = spec.params.get("toll")
    p = np.zeros(codag.n_orig) if p is None else _parse_float_list(p, codag.n_orig, "--toll")
    res = equilibrium.solve_equilibrium(codag, p, beta)
    doc = _result_envelope("equilibrium", net, codag, beta)
    doc["p"] = _per_orig_map(codag, p)
    doc.update(_equilibrium_payload(codag, res))
    _write_json(spec.output_dir / "result.json", doc)
    return EXIT_OK


def _cmd_social_opt(spec: ExperimentSpec) -> int:
    net = load_network(spec.network)
    codag = network.build_codag(net)
    beta = spec.params.get("beta", 10.0)
    res = equilibrium.solve_social_optimum(codag, beta)
    doc = _result_envelope("social_opt", net, codag, beta)
    doc.update(
        {
            "w_codag": _per_arc_map(codag, res.w_bar.w),
            "w_orig": _per_orig_map(codag, network.aggregate_flow(codag, res.w_bar.w)),
            "objective": res.objective,
            "first_order_gap": res.first_order_gap,
            "iterations": res.iterations,
        }
    )
    _write_json(spec.output_dir / "result.json", doc)
    return EXIT_OK


def _cmd_optimal_toll(spec: ExperimentSpec) -> int:
    net = load_network(spec.network)
    codag = network.build_codag(net)
    beta = spec.params.get("beta", 10.0)
    opts = tolling.TollOptions(
        tol=spec.params.get("tol", 1e-8),
        damping=spec.params.get("damping", 0.3),
    )
    res = tolling.solve_optimal_toll(codag, beta, opts=opts)
    doc = _result_envelope("optimal_toll", net, codag, beta)
    doc["p_bar"] = _per_orig_map(codag, res.p_bar.p)
    doc["p"] = doc["p_bar"]
    doc["fixed_point_residual"] = res.fixed_point_residual
    doc["social_gap"] = res.social_gap
    doc["iterations"] = res.iterations
    doc.update(_equilibrium_payload(codag, res.equilibrium))
    _write_json(spec.output_dir / "result.json", doc)
    return EXIT_OK


def _make_sim_config(codag, params: dict) -> dynamics.SimConfig:
    eta = params.get("eta", "0,0.1")
    eta_low, eta_high = _parse_float_list(eta, 2, "--eta")
    return dynamics.SimConfig(
        beta=params.get("beta", 10.0),
        gamma=params.get("gamma", 0.02),
        eta_low=eta_low,
        eta_high=eta_high,
        K=params.get("K", 1.0),
        horizon=params.get("horizon", 2000),
        seed=params.get("seed", 0),
    )


def _reference_for(codag, beta: float) -> tuple[dynamics.Reference, tolling.OptimalTollResult]:
    opt = tolling.solve_optimal_toll(codag, beta)
    ref = dynamics.Reference(
        xi_bar=opt.equilibrium.xi_bar.xi,
        p_bar=opt.p_bar.p,
        w_bar=opt.equilibrium.w_bar.w,
    )
    return ref, opt


def _cmd_simulate(spec: ExperimentSpec) -> int:
    net = load_network(spec.network)
    codag = network.build_codag(net)
    cfg = _make_sim_config(codag, spec.params)
    ref, opt = _reference_for(codag, cfg.beta)
    trace = dynamics.simulate(codag, cfg, reference=ref)

    with open(spec.output_dir / "trace.csv", "w", newline="") as fh:
        trace.write_csv(fh)

    config_doc = {
        "beta": cfg.beta,
        "gamma": cfg.gamma,
        "eta_low": cfg.eta_low,
        "eta_high": cfg.eta_high,
        "K": _json_floats(cfg.resolve_k(codag)),
        "horizon": cfg.horizon,
        "seed": cfg.seed,
        "xi0": _json_floats(cfg.initial_xi(codag)),
        "p0": _json_floats(cfg.initial_p(codag)),
        "reference": {
            "xi_bar": _per_arc_map(codag, ref.xi_bar),
            "p_bar": _per_orig_map(codag, ref.p_bar),
            "w_bar": _per_arc_map(codag, ref.w_bar),
        },
    }
    _write_json(spec.output_dir / "config.json", config_doc)

    doc = _result_envelope("simulate", net, codag, cfg.beta)
    doc["horizon"] = cfg.horizon
    doc["seed"] = cfg.seed
    doc["gamma"] = cfg.gamma
    doc["reference"] = config_doc["reference"]
    doc["p_bar"] = config_doc["reference"]["p_bar"]
    doc["final"] = {
        "xi": _per_arc_map(codag, trace.xi[-1]),
        "W": _per_arc_map(codag, trace.W[-1]),
        "P": _per_orig_map(codag, trace.P[-1]),
        "dist_xi": None if not np.isfinite(trace.dist_xi[-1]) else float(trace.dist_xi[-1]),
        "dist_p": None if not np.isfinite(trace.dist_p[-1]) else float(trace.dist_p[-1]),
    }
    doc["fixed_point_residual"] = opt.fixed_point_residual
    doc["social_gap"] = opt.social_gap
    _write_json(spec.output_dir / "result.json", doc)
    return EXIT_OK


def _cmd_ode_flow(spec: ExperimentSpec) -> int:
    net = load_network(spec.network)
    codag = network.build_codag(net)
    beta = spec.params.get("beta", 10.0)
    p = spec.params.get("toll")
    p = np.zeros(codag.n_orig) if p is None else _parse_float_list(p, codag.n_orig, "--toll")
    cfg = dynamics.SimConfig(beta=beta, K=spec.params.get("K", 1.0))
    eq = equilibrium.solve_equilibrium(codag, p, beta)
    traj = dynamics.integrate_flow_ode(
        codag,
        p,
        cfg,
        t_end=spec.params.get("t_end", 25.0),
        dt=spec.params.get("dt"),
        w_ref=eq.w_bar.w,
    )
    report = dynamics.lyapunov_report(traj)
    doc = _result_envelope("ode_flow", net, codag, beta)
    doc["p"] = _per_orig_map(codag, p)
    doc["t"] = _json_floats(traj.ts[:: max(1, len(traj.ts) // 1000)])
    doc["F"] = _json_floats(traj.F[:: max(1, len(traj.F) // 1000)])
    doc["terminal_gap"] = traj.terminal_gap
    doc["lyapunov"] = {"passed": report.passed, "max_increase": report.max_increase}
    doc["w_final"] = _per_arc_map(codag, traj.w[-1])
    doc["w_equilibrium"] = _per_arc_map(codag, eq.w_bar.w)
    _write_json(spec.output_dir / "result.json", doc)
    return EXIT_OK if report.passed else EXIT_PROPERTY_FAILURE


def _cmd_ode_toll(spec: ExperimentSpec) -> int:
    net = load_network(spec.network)
    codag = network.build_codag(net)
    beta = spec.params.get("beta", 10.0)
    p0 = spec.params.get("p0")
    p0 = np.zeros(codag.n_orig) if p0 is None else _parse_float_list(p0, codag.n_orig, "--p0")
    traj = dynamics.integrate_toll_ode(
        codag,
        p0,
        beta,
        t_end=spec.params.get("t_end", 3.0),
        dt=spec.params.get("dt", 0.01),
    )
    report = dynamics.lyapunov_report(traj)
    doc = _result_envelope("ode_toll", net, codag, beta)
    doc["p0"] = _per_orig_map(codag, p0)
    doc["p_bar"] = _per_orig_map(codag, traj.p_bar)
    doc["t"] = _json_floats(traj.ts[:: max(1, len(traj.ts) // 1000)])
    doc["V"] = _json_floats(traj.V[:: max(1, len(traj.V) // 1000)])
    doc["p_final"] = _per_orig_map(codag, traj.p[-1])
    doc["lyapunov"] = {
        "passed": report.passed,
        "max_increase": report.max_increase,
        "fitted_rate": report.fitted_rate,
    }
    _write_json(spec.output_dir / "result.json", doc)
    return EXIT_OK if report.passed else EXIT_PROPERTY_FAILURE


def _verify_monotonicity(codag, beta, trials, seed) -> dict:
    report = tolling.check_monotonicity(
        codag, beta, trials=trials, rng=np.random.default_rng(seed)
    )
    return {
        "passed": report.passed,
        "max_inner_product": report.max_inner_product,
        "trials": report.trials,
    }


def _verify_uniqueness(codag, beta, starts, seed) -> dict:
    rng = np.random.default_rng(seed)
    cap = tolling.toll_cap(codag)
    solutions = []
    for _ in range(starts):
        p0 = rng.uniform(0.0, cap, size=codag.n_orig)
        solutions.append(tolling.solve_optimal_toll(codag, beta, p0=p0).p_bar.p)
    spread = float(np.max(np.ptp(np.array(solutions), axis=0)))
    return {"passed": spread <= 1e-6, "max_spread": spread, "starts": starts}


def _verify_lyapunov_flow(codag, beta) -> dict:
    cfg = dynamics.SimConfig(beta=beta)
    eq = equilibrium.solve_equilibrium(codag, np.zeros(codag.n_orig), beta)
    traj = dynamics.integrate_flow_ode(
        codag, np.zeros(codag.n_orig), cfg, t_end=25.0, dt=0.01, w_ref=eq.w_bar.w
    )
    report = dynamics.lyapunov_report(traj)
    terminal_ok = traj.terminal_gap <= 1e-6
    return {
        "passed": report.passed and terminal_ok,
        "max_increase": report.max_increase,
        "terminal_gap": traj.terminal_gap,
    }


def _verify_lyapunov_toll(codag, beta) -> dict:
    traj = dynamics.integrate_toll_ode(codag, np.zeros(codag.n_orig), beta, t_end=3.0, dt=0.01)
    report = dynamics.lyapunov_report(traj)
    return {
        "passed": report.passed,
        "max_increase": report.max_increase,
        "fitted_rate": report.fitted_rate,
    }


def _verify_bounds(codag, beta, seed) -> dict:
    cfg = dynamics.SimConfig(beta=beta, horizon=1000, seed=seed)
    ref, _ = _reference_for(codag, beta)
    try:
        dynamics.simulate(codag, cfg, reference=ref)
    except TollDagError as exc:
        return {"passed": False, "error": str(exc)}
    # toll-map self-map bound
    rng = np.random.default_rng(seed)
    cap = tolling.toll_cap(codag)
    g = codag.demand
    psi_cap = codag.n_orig * g * max(
        float(codag.net.latency[a].deriv(g)) for a in codag.net.arc_ids
    )
    worst = 0.0
    for _ in range(5):
        p = rng.uniform(0.0, cap, size=codag.n_orig)
        mapped, _ = tolling.marginal_toll_map(codag, p, beta)
        if np.any(mapped < 0):
            return {"passed": False, "error": "toll map produced negative values"}
        worst = max(worst, float(mapped.max()))
    return {"passed": worst <= psi_cap, "max_mapped_toll": worst, "cap": psi_cap}


def _cmd_verify(spec: ExperimentSpec) -> int:
    net = load_network(spec.network)
    codag = network.build_codag(net)
    beta = spec.params.get("beta", 10.0)
    trials = spec.params.get("trials", 100)
    seed = spec.params.get("seed", 0)
    max_workers = int(os.environ.get("TOLLDAG_THREADS", "4") or "4")

    tasks = {
        "monotonicity": lambda: _verify_monotonicity(codag, beta, trials, seed),
        "toll_uniqueness": lambda: _verify_uniqueness(codag, beta, 10, seed + 1),
        "lyapunov_flow": lambda: _verify_lyapunov_flow(codag, beta),
        "lyapunov_toll": lambda: _verify_lyapunov_toll(codag, beta),
        "bounds": lambda: _verify_bounds(codag, beta, seed + 2),
    }
    verdicts: dict[str, dict] = {}
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        futures = {name: pool.submit(fn) for name, fn in tasks.items()}
        for name, fut in futures.items():
            try:
                verdicts[name] = fut.result()
            except TollDagError as exc:
                verdicts[name] = {"passed": False, "error": str(exc)}

    all_passed = all(v.get("passed") for v in verdicts.values())
    doc = _result_envelope("verify", net, codag, beta)
    doc["verdicts"] = verdicts
    doc["passed"] = all_passed
    _write_json(spec.output_dir / "result.json", doc)
    for name, verdict in sorted(verdicts.items()):
        status = "PASS" if verdict.get("passed") else "FAIL"
        print(f"[{status}] {name}: {verdict}")
    return EXIT_OK if all_passed else EXIT_PROPERTY_FAILURE


_COMMANDS = {
    "equilibrium": _cmd_equilibrium,
    "social_opt": _cmd_social_opt,
    "optimal_toll": _cmd_optimal_toll,
    "simulate": _cmd_simulate,
    "ode_flow": _cmd_ode_flow,
    "ode_toll": _cmd_ode_toll,
    "verify": _cmd_verify,
}


def run(spec: ExperimentSpec) -> int:
    """Execute one experiment; returns the process exit code."""
    if spec.command not in _COMMANDS:
        print(f"unknown command {spec.command!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        spec.output_dir.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[spec.command](spec)
    except (ParseError, ValidationError, InvalidOptions, NoRoute, RouteExplosion) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergence as exc:
        print(f"solver failed: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except TollDagError as exc:
        print(f"property violation: {exc}", file=sys.stderr)
        return EXIT_PROPERTY_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toll-dag",
        description="Arc-based traffic assignment and adaptive marginal-cost tolling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--network", required=True, help="builtin name or JSON file path")
        sp.add_argument("--beta", type=float, default=10.0)
        sp.add_argument("--output-dir", "-o", type=Path, default=Path("."))

    sp = sub.add_parser("equilibrium", help="solve the arc-choice equilibrium at fixed tolls")
    add_common(sp)
    sp.add_argument("--toll", help="comma-separated per-original-arc tolls (default zeros)")

    sp = sub.add_parser("social_opt", help="solve the perturbed social optimum")
    add_common(sp)

    sp = sub.add_parser("optimal_toll", help="solve the marginal-cost toll fixed point")
    add_common(sp)
    sp.add_argument("--tol", type=float, default=1e-8)
    sp.add_argument("--damping", type=float, default=0.3)

    sp = sub.add_parser("simulate", help="run the discrete two-timescale dynamics")
    add_common(sp)
    sp.add_argument("--gamma", type=float, default=0.02)
    sp.add_argument("--eta", default="0,0.1", help="low,high of the uniform mixing weight")
    sp.add_argument("--K", type=float, default=1.0)
    sp.add_argument("--horizon", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("ode_flow", help="integrate the continuous arc-selection dynamics")
    add_common(sp)
    sp.add_argument("--toll", help="comma-separated tolls (default zeros)")
    sp.add_argument("--t-end", dest="t_end", type=float, default=25.0)
    sp.add_argument("--dt", type=float)
    sp.add_argument("--K", type=float, default=1.0)

    sp = sub.add_parser("ode_toll", help="integrate the continuous toll dynamics")
    add_common(sp)
    sp.add_argument("--p0", help="comma-separated initial tolls (default zeros)")
    sp.add_argument("--t-end", dest="t_end", type=float, default=3.0)
    sp.add_argument("--dt", type=float, default=0.01)

    sp = sub.add_parser("verify", help="run the property suite against a network")
    add_common(sp)
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    params = {
        k: v
        for k, v in vars(args).items()
        if k not in {"command", "network", "output_dir"} and v is not None
    }
    spec = ExperimentSpec(
        network=args.network,
        command=args.command,
        params=params,
        output_dir=args.output_dir,
    )
    return run(spec)


if __name__ == "__main__":
    sys.exit(main())
