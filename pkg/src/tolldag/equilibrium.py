"""Equilibrium and social-optimum solvers over the CoDAG flow polytope.

Two independent routes to the same targets:

* ``solve_equilibrium`` iterates the damped fixed point (backward
  cost-to-go pass, forward flow propagation) whose rest point is the
  unique equilibrium at a given toll vector.
* ``minimize_potential`` / ``solve_social_optimum`` directly minimize
  the corresponding strictly convex objective over the flow polytope
  with an equality-constrained Newton method, certified by a
  first-order (linear-minimization) gap.

A note on the node inflow convention: the flow entering a
non-destination node is the demand released there plus the flow on
*incoming* arcs.  That is the only flow-conserving reading and the one
used throughout.

The potential combines latency-plus-toll integrals over original arcs
with a per-node entropy term weighted by 1/beta; x*ln(x) is extended
continuously by 0 at x = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.linalg import null_space

from .choice import ChoiceProbs, CostToGo, cost_to_go, logit_probs
from .errors import (
    InvalidOptions,
    NegativeFlow,
    NonConvergence,
    NonFiniteInput,
)
from .network import (
    CoDag,
    aggregate_flow,
    conservation_residual,
    propagate_flows_raw,
)


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-10  # max-norm fixed-point flow residual
    max_iter: int = 10**5
    damping: float = 0.5
    vi_tol: float = 1e-6  # first-order optimality gap at success

    def validate(self) -> None:
        if not self.tol > 0:
            raise InvalidOptions(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise InvalidOptions(f"max_iter must be >= 1, got {self.max_iter}")
        if not 0 < self.damping <= 1:
            raise InvalidOptions(f"damping must be in (0, 1], got {self.damping}")


@dataclass
class FlowPolytopePoint:
    """A per-CoDAG-arc flow vector intended to satisfy conservation."""

    w: np.ndarray

    def conservation_residual(self, codag: CoDag) -> float:
        return conservation_residual(codag, self.w)

    def in_polytope(self, codag: CoDag, rtol: float = 1e-10) -> bool:
        return (
            bool(np.all(self.w >= -rtol * codag.demand))
            and self.conservation_residual(codag) <= rtol * codag.demand
        )


@dataclass
class EquilibriumResult:
    w_bar: FlowPolytopePoint
    xi_bar: ChoiceProbs
    z: CostToGo
    potential: float
    vi_residual: float
    fixed_point_residual: float
    iterations: int

    @property
    def flow_floor(self) -> float:
        """Smallest equilibrium arc flow; strictly positive at a solution."""
        return float(self.w_bar.w.min())


@dataclass
class MinimizeResult:
    w_bar: FlowPolytopePoint
    objective: float
    first_order_gap: float
    iterations: int


def uniform_choice(codag: CoDag) -> np.ndarray:
    """Uniform arc selection at every node."""
    counts = np.diff(np.append(codag.out_starts, codag.n_arcs))
    return np.repeat(1.0 / counts, counts)


def flow_ratios(codag: CoDag, w: np.ndarray) -> np.ndarray:
    """Arc selection fractions w_a / (node outflow), per arc."""
    sums = codag.per_arc(codag.segment_sums(w))
    counts = codag.per_arc(np.diff(np.append(codag.out_starts, codag.n_arcs)).astype(float))
    with np.errstate(invalid="ignore", divide="ignore"):
        xi = np.where(sums > 0, w / np.where(sums > 0, sums, 1.0), 1.0 / counts)
    return xi


def _xlogx(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    mask = x > 0
    out[mask] = x[mask] * np.log(x[mask])
    return out


def _entropy_term(codag: CoDag, w: np.ndarray) -> float:
    """sum_i [ sum w ln w - (sum w) ln(sum w) ] over non-destination nodes."""
    per_node = codag.segment_sums(_xlogx(w))
    sums = codag.segment_sums(w)
    return float(per_node.sum() - _xlogx(sums).sum())


def _latency_integrals(codag: CoDag, w_orig: np.ndarray, p: np.ndarray) -> float:
    """sum over original arcs of int_0^{w} [s(u) + p] du."""
    if codag.net.all_affine:
        theta1, theta0 = codag.theta_arrays()
        return float(np.sum(theta1 * w_orig**2 / 2.0 + (theta0 + p) * w_orig))
    total = 0.0
    for j, arc_id in enumerate(codag.net.arc_ids):
        fn = codag.net.latency[arc_id]
        x = float(w_orig[j])
        if fn.is_affine:
            total += fn.theta1 * x * x / 2.0 + (fn.theta0 + p[j]) * x
        else:
            val, _ = integrate.quad(fn.fn, 0.0, x)
            total += val + p[j] * x
    return total


def potential_F(codag: CoDag, w, p, beta: float) -> float:
    """Latency-integral-plus-entropy objective whose minimizer is the equilibrium."""
    w = np.asarray(getattr(w, "w", w), dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(w < 0):
        raise NegativeFlow("flows must be nonnegative")
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(p))):
        raise NonFiniteInput("flows and tolls must be finite")
    w_orig = aggregate_flow(codag, w)
    return _latency_integrals(codag, w_orig, p) + _entropy_term(codag, w) / beta


def social_objective(codag: CoDag, w, beta: float) -> float:
    """Total latency plus entropy: the perturbed social cost."""
    w = np.asarray(getattr(w, "w", w), dtype=float)
    if np.any(w < 0):
        raise NegativeFlow("flows must be nonnegative")
    w_orig = aggregate_flow(codag, w)
    total = float(np.sum(w_orig * codag.latency_values(w_orig)))
    return total + _entropy_term(codag, w) / beta


def _entropy_grad(codag: CoDag, w: np.ndarray, beta: float) -> np.ndarray:
    # floor keeps the gradient finite when a selection probability
    # underflows; such arcs carry no representable flow anyway
    sums = codag.per_arc(codag.segment_sums(w))
    ratio = np.maximum(w / sums, 1e-300)
    return np.log(ratio) / beta


def grad_potential(codag: CoDag, w: np.ndarray, p: np.ndarray, beta: float) -> np.ndarray:
    """Closed-form gradient s(w_[a]) + p_[a] + (1/beta) ln(w_a / node outflow)."""
    w_orig = aggregate_flow(codag, w)
    s_vals = codag.latency_values(w_orig)
    return (s_vals + np.asarray(p, dtype=float))[codag.arc_orig] + _entropy_grad(codag, w, beta)


def grad_social(codag: CoDag, w: np.ndarray, beta: float) -> np.ndarray:
    """Gradient of the social cost: s + w s' on aggregates, plus entropy."""
    w_orig = aggregate_flow(codag, w)
    mc = codag.latency_values(w_orig) + w_orig * codag.marginal_latency_values(w_orig)
    return mc[codag.arc_orig] + _entropy_grad(codag, w, beta)


def min_linear_over_polytope(codag: CoDag, costs: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimize costs . v over the flow polytope.

    The minimum is attained on a single path carrying all demand;
    found by shortest-path dynamic programming over the DAG.
    """
    dist = np.zeros(codag.n_nodes)
    best_arc = np.full(codag.n_nodes, -1, dtype=int)
    for node in range(codag.n_nodes - 1, -1, -1):
        if node == codag.destination_idx:
            continue
        arcs = codag.out_arcs[node]
        vals = [costs[a] + dist[codag.arc_head[a]] for a in arcs]
        k = int(np.argmin(vals))
        dist[node] = vals[k]
        best_arc[node] = arcs[k]
    v = np.zeros(codag.n_arcs)
    node = codag.origin_idx
    while node != codag.destination_idx:
        a = best_arc[node]
        v[a] = codag.demand
        node = codag.arc_head[a]
    return v, codag.demand * dist[codag.origin_idx]


def first_order_gap(codag: CoDag, w: np.ndarray, grad: np.ndarray) -> float:
    """max over feasible v of grad . (w - v); zero exactly at the minimizer."""
    _, best = min_linear_over_polytope(codag, grad)
    return float(grad @ w - best)


def _constraint_matrix(codag: CoDag) -> tuple[np.ndarray, np.ndarray]:
    """Equality constraints A w = b: origin outflow and node conservation."""
    rows = []
    rhs = []
    row = np.zeros(codag.n_arcs)
    row[list(codag.out_arcs[codag.origin_idx])] = 1.0
    rows.append(row)
    rhs.append(codag.demand)
    for node in range(codag.n_nodes):
        if node in (codag.origin_idx, codag.destination_idx):
            continue
        row = np.zeros(codag.n_arcs)
        row[list(codag.out_arcs[node])] += 1.0
        row[list(codag.in_arcs[node])] -= 1.0
        rows.append(row)
        rhs.append(0.0)
    return np.array(rows), np.array(rhs)


def _hessian(
    codag: CoDag, w: np.ndarray, beta: float, social: bool
) -> np.ndarray:
    """Hessian of F (or of the social cost) in full CoDAG coordinates."""
    n = codag.n_arcs
    H = np.zeros((n, n))
    w_orig = aggregate_flow(codag, w)
    for j, arc_id in enumerate(codag.net.arc_ids):
        fn = codag.net.latency[arc_id]
        x = float(w_orig[j])
        d1 = float(fn.deriv(x))
        if social:
            d2 = 0.0 if fn.is_affine else _second_deriv(fn, x)
            coeff = 2.0 * d1 + x * d2
        else:
            coeff = d1
        copies = np.flatnonzero(codag.arc_orig == j)
        H[np.ix_(copies, copies)] += coeff
    for node in range(codag.n_nodes):
        arcs = list(codag.out_arcs[node])
        if not arcs:
            continue
        ws = w[arcs]
        total = float(ws.sum())
        block = np.diag(1.0 / ws) - 1.0 / total
        H[np.ix_(arcs, arcs)] += block / beta
    return H


def _second_deriv(fn, x: float, h: float = 1e-6) -> float:
    lo = max(x - h, 0.0)
    return (float(fn.deriv(x + h)) - float(fn.deriv(lo))) / (x + h - lo)


def _newton_minimize(
    codag: CoDag,
    w0: np.ndarray,
    obj,
    grad,
    hess,
    gap_tol: float,
    max_iter: int = 500,
) -> MinimizeResult:
    """Newton descent over the interior of the polytope.

    The conservation equalities are eliminated once via an orthonormal
    null-space basis, so each iteration solves a reduced positive-
    definite system; a fraction-to-boundary rule keeps flows strictly
    positive without collapsing the step.  Success is certified by the
    linear-minimization gap, which needs no constraint qualification.
    """
    A, _ = _constraint_matrix(codag)
    basis = null_space(A)
    w = np.asarray(w0, dtype=float).copy()
    gap = np.inf
    for it in range(1, max_iter + 1):
        g = grad(w)
        gap = first_order_gap(codag, w, g)
        if gap <= gap_tol:
            return MinimizeResult(FlowPolytopePoint(w), obj(w), gap, it)
        reduced_h = basis.T @ hess(w) @ basis
        reduced_g = basis.T @ g
        try:
            dy = np.linalg.solve(reduced_h, -reduced_g)
        except np.linalg.LinAlgError:
            ridge = 1e-12 * np.trace(reduced_h) / max(1, reduced_h.shape[0])
            dy = np.linalg.solve(
                reduced_h + ridge * np.eye(reduced_h.shape[0]), -reduced_g
            )
        dw = basis @ dy
        slope = float(g @ dw)
        neg = dw < 0
        t = 1.0
        if np.any(neg):
            t = min(1.0, 0.995 * float(np.min(w[neg] / -dw[neg])))
        f0 = obj(w)
        while t >= 1e-18 and obj(np.maximum(w + t * dw, 0.0)) > f0 + 1e-4 * t * slope:
            t *= 0.5
        if t < 1e-18:
            # no further progress possible; the gap certificate decides
            break
        w = np.maximum(w + t * dw, 1e-300)
    g = grad(w)
    gap = first_order_gap(codag, w, g)
    if gap > gap_tol:
        raise NonConvergence(max_iter, gap, what="constrained Newton")
    return MinimizeResult(FlowPolytopePoint(w), obj(w), gap, max_iter)


def _logit_space_minimize(
    codag: CoDag,
    obj,
    grad,
    gap_tol: float,
    u0: np.ndarray | None = None,
    max_iter: int = 300,
) -> MinimizeResult:
    """Minimize over the polytope through per-node selection logits.

    The flow map w(softmax(u)) covers the polytope interior, satisfies
    conservation exactly by construction, and represents vanishing
    flows as moderately negative logits.  Along a tail direction both
    the gradient and the curvature scale with the selection
    probability, so a (saddle-free) Newton step stays O(1) where plain
    gradient methods flatline; the Hessian is finite-differenced from
    the exact adjoint gradient.  Any stationary point of the
    composition is the unique interior minimizer.
    """
    starts = codag.out_starts
    n_seg = len(starts)
    heads = codag.arc_head
    n = codag.n_arcs

    def unpack(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xi = softmax_choice_from_logits(codag, u)
        return xi, propagate_flows_raw(codag, xi, codag.demand)

    def obj_u(u: np.ndarray) -> float:
        _, w = unpack(u)
        return float(obj(w))

    def grad_u(u: np.ndarray) -> np.ndarray:
        xi, w = unpack(u)
        gw = grad(w)
        # xi sums to one per node, so node outflow equals node inflow
        inflow = codag.segment_sums(w)
        # adjoint sweep: lam[i] is the sensitivity of the objective to
        # the inflow at node i through all downstream flows
        lam = np.zeros(codag.n_nodes)
        dxi = np.empty(n)
        for k in range(n_seg - 1, -1, -1):
            s = starts[k]
            e = starts[k + 1] if k + 1 < n_seg else n
            gbar = gw[s:e] + lam[heads[s:e]]
            lam[k] = float(np.dot(xi[s:e], gbar))
            dxi[s:e] = inflow[k] * gbar
        weighted = codag.per_arc(codag.segment_sums(xi * dxi))
        return xi * (dxi - weighted)

    def recenter(u: np.ndarray) -> np.ndarray:
        return u - codag.per_arc(np.maximum.reduceat(u, starts))

    u = recenter(np.zeros(n) if u0 is None else np.asarray(u0, dtype=float))
    gap = np.inf
    for it in range(1, max_iter + 1):
        xi, w = unpack(u)
        gap = first_order_gap(codag, w, grad(w))
        if gap <= gap_tol:
            return MinimizeResult(FlowPolytopePoint(w), float(obj(w)), gap, it)
        g = grad_u(u)
        h = np.empty((n, n))
        step = 1e-6
        for i in range(n):
            up, um = u.copy(), u.copy()
            up[i] += step
            um[i] -= step
            h[:, i] = (grad_u(up) - grad_u(um)) / (2.0 * step)
        h = 0.5 * (h + h.T)
        eigval, eigvec = np.linalg.eigh(h)
        floor = max(1e-10 * np.max(np.abs(eigval)), 1e-14)
        scaled = np.maximum(np.abs(eigval), floor)
        du = -eigvec @ ((eigvec.T @ g) / scaled)
        slope = float(g @ du)
        if slope >= 0:
            du = -g
            slope = float(g @ du)
        f0 = obj_u(u)
        t = 1.0
        while t >= 1e-16 and obj_u(u + t * du) > f0 + 1e-4 * t * slope:
            t *= 0.5
        if t < 1e-16:
            break
        u = recenter(u + t * du)
    _, w = unpack(u)
    gap = first_order_gap(codag, w, grad(w))
    if gap > gap_tol:
        raise NonConvergence(max_iter, gap, what="logit-space minimization")
    return MinimizeResult(FlowPolytopePoint(w), float(obj(w)), gap, max_iter)


def softmax_choice_from_logits(codag: CoDag, u: np.ndarray) -> np.ndarray:
    umax = np.maximum.reduceat(u, codag.out_starts)
    ex = np.exp(u - codag.per_arc(umax))
    return ex / codag.per_arc(codag.segment_sums(ex))


def _direct_minimize(codag, w0, obj, grad, hess, gap_tol) -> MinimizeResult:
    """Newton in flow space, with a logit-space fallback for regimes the
    flow-space Hessian cannot condition."""
    try:
        return _newton_minimize(codag, w0, obj, grad, hess, gap_tol)
    except NonConvergence:
        xi0 = flow_ratios(codag, np.asarray(w0, dtype=float))
        u0 = np.log(np.maximum(xi0, 1e-300))
        return _logit_space_minimize(codag, obj, grad, gap_tol, u0=u0)


def minimize_potential(
    codag: CoDag,
    p,
    beta: float,
    gap_tol: float = 1e-8,
    w0: np.ndarray | None = None,
) -> MinimizeResult:
    """Directly minimize the equilibrium potential over the polytope."""
    p = np.asarray(p, dtype=float)
    start = w0 if w0 is not None else propagate_flows_raw(codag, uniform_choice(codag), codag.demand)
    return _direct_minimize(
        codag,
        start,
        obj=lambda w: potential_F(codag, w, p, beta),
        grad=lambda w: grad_potential(codag, w, p, beta),
        hess=lambda w: _hessian(codag, w, beta, social=False),
        gap_tol=gap_tol,
    )


def solve_social_optimum(
    codag: CoDag, beta: float, opts: SolverOptions | None = None
) -> MinimizeResult:
    """Minimize total latency plus entropy: the perturbed social optimum."""
    opts = opts or SolverOptions()
    opts.validate()
    start = propagate_flows_raw(codag, uniform_choice(codag), codag.demand)
    return _direct_minimize(
        codag,
        start,
        obj=lambda w: social_objective(codag, w, beta),
        grad=lambda w: grad_social(codag, w, beta),
        hess=lambda w: _hessian(codag, w, beta, social=True),
        gap_tol=min(opts.vi_tol, 1e-8),
    )


def solve_equilibrium(
    codag: CoDag,
    p,
    beta: float,
    opts: SolverOptions | None = None,
    w0: np.ndarray | None = None,
) -> EquilibriumResult:
    """Damped fixed-point solve of the arc-choice equilibrium at toll p.

    Each sweep recomputes cost-to-go from the current flows, takes the
    logit response, and propagates it forward; the new flow is blended
    in with an adaptive damping factor.  If progress stalls, one direct
    Newton minimization of the potential re-centers the iterate (both
    target the same unique point).
    """
    opts = opts or SolverOptions()
    opts.validate()
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise NonFiniteInput("tolls must be finite")
    if beta <= 0:
        raise InvalidOptions(f"beta must be positive, got {beta}")

    if w0 is not None:
        xi = np.maximum(flow_ratios(codag, np.asarray(w0, dtype=float)), 1e-300)
        xi = xi / codag.per_arc(codag.segment_sums(xi))
    else:
        xi = uniform_choice(codag)
    w = propagate_flows_raw(codag, xi, codag.demand)
    delta = opts.damping
    prev_res = np.inf
    window_res = np.inf
    used_fallback = False
    res = np.inf
    iterations = 0
    for iterations in range(1, opts.max_iter + 1):
        ctg = cost_to_go(codag, w, p, beta)
        xi_new = logit_probs(codag, ctg).xi
        w_new = propagate_flows_raw(codag, xi_new, codag.demand)
        res = float(np.max(np.abs(w_new - w)))
        # exit needs the small selection probabilities to be consistent
        # in relative (log) terms as well, or the optimality certificate
        # would see stale log-ratios on negligible arcs
        active = xi_new > 1e-250
        res_log = (
            float(np.max(np.abs(np.log(xi[active] / xi_new[active]))))
            if active.any()
            else 0.0
        )
        if res <= opts.tol and res_log <= 1e-8:
            break
        if res > prev_res:
            delta = max(delta * 0.5, 1e-2)
        prev_res = res
        if iterations % 100 == 0:
            # Rate control over a window: near-neutral oscillations
            # decay monotonically but too slowly to ever trigger the
            # per-iteration halving above.
            ratio = res / window_res if window_res < np.inf else 0.0
            if ratio > 0.5:
                if delta > 0.011:
                    delta = max(delta * 0.5, 1e-2)
                elif ratio > 0.9 and not used_fallback:
                    # re-center on a direct potential minimization;
                    # advisory only, the loop still has to meet its
                    # own exit criterion
                    used_fallback = True
                    try:
                        direct = minimize_potential(codag, p, beta, gap_tol=1e-6, w0=w)
                    except NonConvergence:
                        direct = None
                    if direct is not None:
                        xi = np.maximum(flow_ratios(codag, direct.w_bar.w), 1e-300)
                        xi = xi / codag.per_arc(codag.segment_sums(xi))
                        w = propagate_flows_raw(codag, xi, codag.demand)
                        window_res = np.inf
                        prev_res = np.inf
                        continue
            elif ratio < 0.01:
                delta = min(delta * 1.3, opts.damping)
            window_res = res
        # geometric mixing keeps small selection probabilities accurate
        # in relative terms, which additive damping cannot
        mixed = np.maximum(xi ** (1.0 - delta) * xi_new**delta, 1e-300)
        xi = mixed / codag.per_arc(codag.segment_sums(mixed))
        w = propagate_flows_raw(codag, xi, codag.demand)
    else:
        raise NonConvergence(opts.max_iter, res, what="equilibrium fixed point")

    ctg = cost_to_go(codag, w, p, beta)
    gap = first_order_gap(codag, w, grad_potential(codag, w, p, beta))
    if gap > opts.vi_tol:
        raise NonConvergence(iterations, gap, what="equilibrium optimality gap")
    return EquilibriumResult(
        w_bar=FlowPolytopePoint(w),
        xi_bar=ChoiceProbs(flow_ratios(codag, w)),
        z=ctg,
        potential=potential_F(codag, w, p, beta),
        vi_residual=gap,
        fixed_point_residual=res,
        iterations=iterations,
    )


def random_feasible_flows(codag: CoDag, rng: np.random.Generator, n: int) -> np.ndarray:
    """n random interior points of the flow polytope, one per row.

    Dirichlet arc-selection fractions at every node, pushed forward.
    """
    out = np.empty((n, codag.n_arcs))
    for k in range(n):
        xi = np.zeros(codag.n_arcs)
        for node in range(codag.n_nodes):
            arcs = list(codag.out_arcs[node])
            if not arcs:
                continue
            xi[arcs] = rng.dirichlet(np.ones(len(arcs)))
        out[k] = propagate_flows_raw(codag, xi, codag.demand)
    return out
