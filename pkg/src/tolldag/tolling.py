"""Marginal-cost tolls: the toll map, its fixed point, and certificates.

One application of the toll map prices each original arc at flow times
marginal latency, evaluated at the equilibrium flow the current tolls
induce.  Its unique fixed point makes the induced equilibrium carry the
perturbed socially optimal flow, which is verified here by an
independent direct solve of the social-optimum program.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .equilibrium import (
    EquilibriumResult,
    FlowPolytopePoint,
    SolverOptions,
    solve_equilibrium,
    solve_social_optimum,
)
from .errors import InvalidOptions, NonConvergence, SocialGapViolation
from .network import CoDag, aggregate_flow


@dataclass(frozen=True)
class TollOptions:
    tol: float = 1e-8  # max-norm of p - toll_map(p)
    damping: float = 0.3
    max_iter: int = 10**4
    social_gap_tol: float = 1e-6

    def validate(self) -> None:
        if not self.tol > 0:
            raise InvalidOptions(f"tol must be positive, got {self.tol}")
        if not 0 < self.damping <= 1:
            raise InvalidOptions(f"damping must be in (0, 1], got {self.damping}")
        if self.max_iter < 1:
            raise InvalidOptions(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass
class TollVector:
    """Per-original-arc tolls, same units as latency."""

    p: np.ndarray


@dataclass
class OptimalTollResult:
    p_bar: TollVector
    w_at_p_bar: FlowPolytopePoint
    fixed_point_residual: float
    social_gap: float
    iterations: int
    equilibrium: EquilibriumResult


def toll_cap(codag: CoDag, p0: np.ndarray | None = None) -> float:
    """Upper bound C_p: max of initial tolls and demand times max marginal latency."""
    g = codag.demand
    max_ds = max(
        float(codag.net.latency[a].deriv(g)) for a in codag.net.arc_ids
    )
    cap = g * max_ds
    if p0 is not None:
        cap = max(cap, float(np.max(p0)))
    return cap


def marginal_toll_map(
    codag: CoDag,
    p,
    beta: float,
    eq_opts: SolverOptions | None = None,
    w0: np.ndarray | None = None,
) -> tuple[np.ndarray, EquilibriumResult]:
    """One toll-map application: equilibrium flow times marginal latency.

    Returns the mapped tolls together with the inner equilibrium result
    so callers can warm-start subsequent solves.
    """
    p = np.asarray(p, dtype=float)
    eq = solve_equilibrium(codag, p, beta, opts=eq_opts, w0=w0)
    w_orig = aggregate_flow(codag, eq.w_bar.w)
    mapped = np.empty(codag.n_orig)
    for j, arc_id in enumerate(codag.net.arc_ids):
        mapped[j] = w_orig[j] * float(codag.net.latency[arc_id].deriv(w_orig[j]))
    return mapped, eq


def solve_optimal_toll(
    codag: CoDag,
    beta: float,
    opts: TollOptions | None = None,
    p0: np.ndarray | None = None,
) -> OptimalTollResult:
    """Damped Picard iteration on the toll map, certified socially optimal.

    The inner equilibrium tolerance is 100x tighter than the outer toll
    tolerance so inner noise cannot floor the fixed-point residual.  At
    convergence the aggregated equilibrium flow must match an
    independent social-optimum solve; disagreement raises
    SocialGapViolation (a solver bug, not a modeling condition).
    """
    opts = opts or TollOptions()
    opts.validate()
    p = np.zeros(codag.n_orig) if p0 is None else np.asarray(p0, dtype=float).copy()
    eq_opts = SolverOptions(tol=0.01 * opts.tol)
    warm = None
    residual = np.inf
    eq = None
    converged = False
    for it in range(1, opts.max_iter + 1):
        mapped, eq = marginal_toll_map(codag, p, beta, eq_opts=eq_opts, w0=warm)
        warm = eq.w_bar.w
        residual = float(np.max(np.abs(mapped - p)))
        if residual <= opts.tol:
            # Snap onto the mapped point and verify the residual there;
            # near the fixed point this only tightens the answer, and on
            # toll-insensitive arcs it recovers the closed form exactly.
            candidate = mapped
            mapped2, eq2 = marginal_toll_map(codag, candidate, beta, eq_opts=eq_opts, w0=warm)
            residual2 = float(np.max(np.abs(mapped2 - candidate)))
            if residual2 <= residual:
                p, eq, residual, warm = candidate, eq2, residual2, eq2.w_bar.w
            if residual <= opts.tol:
                converged = True
                break
        p = (1.0 - opts.damping) * p + opts.damping * mapped
    if not converged:
        raise NonConvergence(opts.max_iter, residual, what="optimal toll fixed point")

    social = solve_social_optimum(codag, beta)
    gap_orig = float(
        np.max(
            np.abs(
                aggregate_flow(codag, eq.w_bar.w)
                - aggregate_flow(codag, social.w_bar.w)
            )
        )
    )
    gap_codag = float(np.max(np.abs(eq.w_bar.w - social.w_bar.w)))
    social_gap = max(gap_orig, gap_codag)
    if social_gap > opts.social_gap_tol:
        raise SocialGapViolation(
            f"converged toll fixed point is not socially optimal: gap {social_gap:.3e}"
        )
    return OptimalTollResult(
        p_bar=TollVector(p),
        w_at_p_bar=eq.w_bar,
        fixed_point_residual=residual,
        social_gap=social_gap,
        iterations=it,
        equilibrium=eq,
    )


@dataclass
class MonotonicityReport:
    trials: int
    max_inner_product: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_inner_product <= self.tolerance


def check_monotonicity(
    codag: CoDag,
    beta: float,
    trials: int,
    rng: np.random.Generator | None = None,
    tolerance: float = 1e-9,
) -> MonotonicityReport:
    """Sample toll pairs and verify the equilibrium map is monotone.

    For tolls p, p' the inner product over CoDAG arcs of the flow
    change against the per-arc toll change must be nonpositive.
    """
    if trials < 1:
        raise InvalidOptions(f"trials must be >= 1, got {trials}")
    rng = rng or np.random.default_rng(0)
    cap = toll_cap(codag)
    worst = -np.inf
    for _ in range(trials):
        p = rng.uniform(0.0, cap, size=codag.n_orig)
        p2 = rng.uniform(0.0, cap, size=codag.n_orig)
        w = solve_equilibrium(codag, p, beta).w_bar.w
        w2 = solve_equilibrium(codag, p2, beta).w_bar.w
        diff_p = (p2 - p)[codag.arc_orig]
        inner = float(np.dot(w2 - w, diff_p))
        worst = max(worst, inner)
    return MonotonicityReport(trials=trials, max_inner_product=worst, tolerance=tolerance)
