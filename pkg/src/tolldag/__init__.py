"""Arc-based traffic assignment and adaptive marginal-cost tolling."""

from .dynamics import Reference, SimConfig, simulate
from .equilibrium import solve_equilibrium, solve_social_optimum
from .network import (
    AffineLatency,
    CoDag,
    GeneralLatency,
    OriginalNetwork,
    aggregate_flow,
    build_codag,
    enumerate_acyclic_routes,
)
from .tolling import solve_optimal_toll

__all__ = [
    "AffineLatency",
    "CoDag",
    "GeneralLatency",
    "OriginalNetwork",
    "Reference",
    "SimConfig",
    "aggregate_flow",
    "build_codag",
    "enumerate_acyclic_routes",
    "simulate",
    "solve_equilibrium",
    "solve_optimal_toll",
    "solve_social_optimum",
]
