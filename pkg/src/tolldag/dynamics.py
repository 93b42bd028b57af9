"""Two-timescale flow/toll dynamics: discrete simulation and ODE limits.

Discrete step: each node independently draws a mixing weight eta and a
(eta * K)-fraction of its travelers switch to the logit best response
against current costs; tolls relax toward flow times marginal latency
at the slow rate gamma.  The continuous-time limits integrate the same
right-hand sides with RK4 and are monitored by their Lyapunov
functions: the potential for the flow dynamics, a weighted squared
toll distance (contracting at rate 2) for the toll dynamics.

Every simulated trajectory is instrumented against the proven bounds
(flows within (0, demand], tolls within [0, C_p], cost-to-go within
+/- C_z, selection fractions on the simplex); a violation aborts the
run with diagnostics rather than returning a corrupt trace.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .choice import backward_pass, cost_to_go, logit_probs, softmax_choice
from .equilibrium import potential_F
from .errors import (
    BoundViolation,
    InvalidOptions,
    LyapunovViolation,
    NonAffineLatency,
    NonFiniteState,
    StepTooLarge,
)
from .network import CoDag, aggregate_flow, conservation_residual, propagate_flows_raw
from .tolling import toll_cap


def propagate_flows(codag: CoDag, xi, demand: float | None = None) -> np.ndarray:
    """Flows induced by arc-selection fractions xi (topological sweep)."""
    xi = np.asarray(getattr(xi, "xi", xi), dtype=float)
    if xi.shape != (codag.n_arcs,):
        raise InvalidOptions(f"expected {codag.n_arcs} fractions, got {xi.shape}")
    return propagate_flows_raw(codag, xi, codag.demand if demand is None else demand)


def uniform_xi(codag: CoDag) -> np.ndarray:
    xi = np.zeros(codag.n_arcs)
    for node in range(codag.n_nodes):
        arcs = list(codag.out_arcs[node])
        if arcs:
            xi[arcs] = 1.0 / len(arcs)
    return xi


@dataclass
class SimConfig:
    """Parameters of the discrete dynamics (defaults follow the benchmark runs).

    The mixing-weight distribution is shared across nodes by default;
    per-node supports are accepted as arrays of one bound per CoDAG
    node.
    """

    beta: float = 10.0
    gamma: float = 0.02
    eta_low: float | np.ndarray = 0.0
    eta_high: float | np.ndarray = 0.1
    K: float | np.ndarray = 1.0  # per-node gains; scalar broadcasts
    horizon: int = 2000
    seed: int = 0
    xi0: np.ndarray | None = None  # default: uniform at every node
    p0: np.ndarray | None = None  # default: zero tolls
    allow_general_latency: bool = False  # use flow-dependent ds/dw in the toll update

    def _per_node(self, value, codag: CoDag, what: str) -> np.ndarray:
        arr = np.asarray(value, dtype=float)
        if arr.ndim == 0:
            arr = np.full(codag.n_nodes, float(arr))
        if arr.shape != (codag.n_nodes,):
            raise InvalidOptions(
                f"{what} must be scalar or one value per CoDAG node ({codag.n_nodes})"
            )
        return arr

    def resolve_k(self, codag: CoDag) -> np.ndarray:
        k = self._per_node(self.K, codag, "K")
        if np.any(k <= 0):
            raise InvalidOptions("K values must be positive")
        return k

    def resolve_eta(self, codag: CoDag) -> tuple[np.ndarray, np.ndarray]:
        lo = self._per_node(self.eta_low, codag, "eta_low")
        hi = self._per_node(self.eta_high, codag, "eta_high")
        return lo, hi

    def validate(self, codag: CoDag) -> None:
        if not 0 < self.gamma < 1:
            raise InvalidOptions(f"gamma must be in (0, 1), got {self.gamma}")
        lo, hi = self.resolve_eta(codag)
        if np.any(lo < 0) or np.any(hi < lo):
            raise InvalidOptions(
                f"eta range [{self.eta_low}, {self.eta_high}] is not ordered"
            )
        k = self.resolve_k(codag)
        if not np.all(hi < 1.0 / k):
            raise InvalidOptions(
                "eta_high must stay below 1/K node-wise "
                "so updates remain convex combinations"
            )
        mean_eta = float(np.mean(0.5 * (lo + hi)))
        if mean_eta > 0 and self.gamma > 0.5 * mean_eta:
            # weak timescale separation degrades the convergence
            # guarantees but remains a legitimate experiment
            warnings.warn(
                f"gamma = {self.gamma} is not well below mean(eta) = {mean_eta}; "
                "toll updates are not clearly slower than flow updates",
                stacklevel=2,
            )
        if self.horizon < 0:
            raise InvalidOptions(f"horizon must be >= 0, got {self.horizon}")
        if self.xi0 is not None:
            xi0 = np.asarray(self.xi0, dtype=float)
            if xi0.shape != (codag.n_arcs,):
                raise InvalidOptions(
                    f"xi0 must have one entry per CoDAG arc ({codag.n_arcs})"
                )
            if np.any(xi0 <= 0):
                raise InvalidOptions("xi0 entries must be strictly positive")

    def initial_xi(self, codag: CoDag) -> np.ndarray:
        if self.xi0 is None:
            return uniform_xi(codag)
        return np.asarray(self.xi0, dtype=float).copy()

    def initial_p(self, codag: CoDag) -> np.ndarray:
        if self.p0 is None:
            return np.zeros(codag.n_orig)
        p0 = np.asarray(self.p0, dtype=float).copy()
        if p0.shape != (codag.n_orig,):
            raise InvalidOptions(
                f"p0 must have one entry per original arc ({codag.n_orig})"
            )
        return p0


class EtaSampler:
    """Counter-based per-(node, step) substreams of mixing weights.

    Step n consumes one dedicated Philox counter block keyed by the
    seed, and node i takes the i-th variate of that block.  Draws for a
    given (node, step) therefore never depend on gamma, K, or how many
    steps are simulated, which enables paired comparisons across
    configurations sharing a seed.  Support bounds may vary per node.
    """

    def __init__(self, seed: int, eta_low, eta_high, n_nodes: int):
        self.seed = int(seed)
        self.n_nodes = int(n_nodes)
        self.eta_low = np.broadcast_to(np.asarray(eta_low, dtype=float), (n_nodes,))
        self.eta_high = np.broadcast_to(np.asarray(eta_high, dtype=float), (n_nodes,))

    def draw(self, step: int) -> np.ndarray:
        gen = np.random.Generator(
            np.random.Philox(key=self.seed, counter=[0, 0, int(step), 0])
        )
        u = gen.random(self.n_nodes)
        return self.eta_low + (self.eta_high - self.eta_low) * u


@dataclass
class SimState:
    xi: np.ndarray  # per CoDAG arc
    W: np.ndarray  # per CoDAG arc, consistent with xi
    P: np.ndarray  # per original arc
    step: int


def _step_core(
    state: SimState,
    codag: CoDag,
    cfg: SimConfig,
    sampler: EtaSampler,
    k_node: np.ndarray,
) -> tuple[SimState, np.ndarray, np.ndarray]:
    """One discrete step; returns (next state, z used, eta used)."""
    w_orig = codag.aggregate_unchecked(state.W)
    costs = (codag.latency_values(w_orig) + state.P)[codag.arc_orig]
    z, _ = backward_pass(codag, costs, cfg.beta)
    br = softmax_choice(codag, z, cfg.beta)
    eta = sampler.draw(state.step)
    mix = (eta * k_node)[codag.arc_tail]
    xi_new = state.xi + mix * (br - state.xi)

    if cfg.allow_general_latency:
        marginal = codag.marginal_latency_values(w_orig)
    else:
        if not codag.net.all_affine:
            raise NonAffineLatency(
                "discrete toll update requires affine latencies "
                "(set allow_general_latency to experiment)"
            )
        marginal = codag.theta_arrays()[0]
    p_new = state.P + cfg.gamma * (-state.P + w_orig * marginal)

    w_new = propagate_flows_raw(codag, xi_new, codag.demand)
    if not (
        np.isfinite(xi_new).all()
        and np.isfinite(p_new).all()
        and np.isfinite(w_new).all()
    ):
        raise NonFiniteState(f"state became non-finite at step {state.step}")
    return SimState(xi_new, w_new, p_new, state.step + 1), z, eta


def step_discrete(
    state: SimState, codag: CoDag, cfg: SimConfig, rng: EtaSampler
) -> SimState:
    """Advance the coupled arc-selection / toll state by one step."""
    k_node = cfg.resolve_k(codag)
    new_state, _, _ = _step_core(state, codag, cfg, rng, k_node)
    return new_state


@dataclass
class Reference:
    """Solved operating point the diagnostics are measured against."""

    xi_bar: np.ndarray  # per CoDAG arc
    p_bar: np.ndarray  # per original arc
    w_bar: np.ndarray | None = None


@dataclass
class BoundSpec:
    """Proven trajectory bounds, precomputed from the network and start.

    C_p caps tolls by the larger of the initial tolls and demand times
    the steepest marginal latency; C_z unwinds the cost-to-go recursion
    height by height, each level adding at most
    max(s_max + C_p, ln|A| / beta).
    """

    c_p: float
    c_z: float
    demand: float
    polytope_tol: float
    simplex_tol: float = 1e-9
    slack: float = 1e-9

    @classmethod
    def for_run(cls, codag: CoDag, p0: np.ndarray, beta: float) -> "BoundSpec":
        g = codag.demand
        c_p = toll_cap(codag, p0)
        s_max = max(float(codag.net.latency[a](g)) for a in codag.net.arc_ids)
        base = s_max + c_p
        increment = max(base, np.log(codag.n_arcs) / beta)
        c_z = base + (codag.height_max - 1) * increment
        return cls(c_p=c_p, c_z=c_z, demand=g, polytope_tol=1e-9 * g)


def _check_bounds(
    spec: BoundSpec,
    codag: CoDag,
    step: int,
    xi: np.ndarray,
    w: np.ndarray,
    p: np.ndarray,
    z: np.ndarray | None,
) -> None:
    """Audit a single recorded state against the proven bounds."""
    eps = spec.slack
    if np.any(w <= 0) or np.any(w > spec.demand * (1 + eps)):
        raise BoundViolation(
            f"step {step}: flow outside (0, demand]: min {w.min():.3e}, max {w.max():.3e}"
        )
    resid = conservation_residual(codag, w)
    if resid > spec.polytope_tol:
        raise BoundViolation(f"step {step}: conservation residual {resid:.3e}")
    if np.any(p < -eps) or np.any(p > spec.c_p * (1 + eps) + eps):
        raise BoundViolation(
            f"step {step}: toll outside [0, C_p={spec.c_p:.6g}]: "
            f"min {p.min():.3e}, max {p.max():.3e}"
        )
    sums = codag.segment_sums(xi)
    if np.any(np.abs(sums - 1.0) > spec.simplex_tol) or np.any(xi <= 0):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise BoundViolation(
            f"step {step}: node {codag.node_ids[bad]} simplex violated "
            f"(sum {sums[bad]!r}, min xi {xi.min():.3e})"
        )
    if z is not None and np.any(np.abs(z) > spec.c_z + eps):
        raise BoundViolation(
            f"step {step}: |z| exceeds C_z={spec.c_z:.6g}: max {np.abs(z).max():.3e}"
        )


def _audit_trajectory(
    spec: BoundSpec,
    codag: CoDag,
    xi: np.ndarray,
    w: np.ndarray,
    p: np.ndarray,
    z: np.ndarray,
) -> None:
    """Vectorized bound audit over a whole recorded run.

    Raises BoundViolation naming the first offending step.
    """
    eps = spec.slack

    def first_bad(mask_rows: np.ndarray, message: str) -> None:
        if mask_rows.any():
            step = int(np.argmax(mask_rows))
            raise BoundViolation(f"step {step}: {message}")

    first_bad(
        ((w <= 0) | (w > spec.demand * (1 + eps))).any(axis=1),
        "flow outside (0, demand]",
    )
    out_sums = np.add.reduceat(w, codag.out_starts, axis=1)
    in_sums = np.zeros((w.shape[0], codag.n_nodes))
    np.add.at(in_sums.T, codag.arc_head, w.T)
    resid = np.abs(out_sums[:, 0] - spec.demand)
    if codag.n_nodes > 2:
        inter = np.abs(out_sums[:, 1:] - in_sums[:, 1 : codag.n_nodes - 1])
        resid = np.maximum(resid, inter.max(axis=1) if inter.size else 0.0)
    first_bad(resid > spec.polytope_tol, "conservation residual too large")
    first_bad(
        ((p < -eps) | (p > spec.c_p * (1 + eps) + eps)).any(axis=1),
        f"toll outside [0, C_p={spec.c_p:.6g}]",
    )
    xi_sums = np.add.reduceat(xi, codag.out_starts, axis=1)
    first_bad(
        (np.abs(xi_sums - 1.0) > spec.simplex_tol).any(axis=1) | (xi <= 0).any(axis=1),
        "simplex violated",
    )
    first_bad((np.abs(z) > spec.c_z + eps).any(axis=1), f"|z| exceeds C_z={spec.c_z:.6g}")


@dataclass
class SimTrace:
    """Time-indexed records of a simulation run plus diagnostics."""

    codag: CoDag
    config: SimConfig
    steps: np.ndarray  # (n+1,)
    xi: np.ndarray  # (n+1, |A|)
    W: np.ndarray  # (n+1, |A|)
    W_orig: np.ndarray  # (n+1, |A_O|)
    P: np.ndarray  # (n+1, |A_O|)
    dist_xi: np.ndarray  # (n+1,), squared Euclidean distance to xi_bar
    dist_p: np.ndarray  # (n+1,), squared Euclidean distance to p_bar
    F: np.ndarray  # potential at (W, P) per step
    V: np.ndarray  # weighted squared toll distance per step
    reference: Reference | None = None
    bounds: BoundSpec | None = field(default=None, repr=False)

    CSV_HEADER = ("step", "arc_id", "xi", "W", "W_orig", "P", "dist_xi", "dist_p", "F", "V")

    @property
    def n_steps(self) -> int:
        return len(self.steps) - 1

    def write_csv(self, fh) -> None:
        """One row per (step, arc); floats as shortest round-trip decimals."""
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(self.CSV_HEADER)
        for row, step in enumerate(self.steps):
            for a in range(self.codag.n_arcs):
                j = self.codag.arc_orig[a]
                writer.writerow(
                    (
                        int(step),
                        self.codag.arc_ids[a],
                        repr(float(self.xi[row, a])),
                        repr(float(self.W[row, a])),
                        repr(float(self.W_orig[row, j])),
                        repr(float(self.P[row, j])),
                        repr(float(self.dist_xi[row])),
                        repr(float(self.dist_p[row])),
                        repr(float(self.F[row])),
                        repr(float(self.V[row])),
                    )
                )


def simulate(
    codag: CoDag, cfg: SimConfig, reference: Reference | None = None
) -> SimTrace:
    """Run the discrete dynamics for cfg.horizon steps.

    Identical (config, seed) pairs produce identical traces.  When a
    reference point is supplied, per-step distances and the toll
    Lyapunov value are recorded; otherwise those columns are NaN.
    Every recorded state is audited against the proven bounds.
    """
    cfg.validate(codag)
    k_node = cfg.resolve_k(codag)
    eta_lo, eta_hi = cfg.resolve_eta(codag)
    sampler = EtaSampler(cfg.seed, eta_lo, eta_hi, codag.n_nodes)

    xi = cfg.initial_xi(codag)
    p = cfg.initial_p(codag)
    w = propagate_flows_raw(codag, xi, codag.demand)
    state = SimState(xi=xi, W=w, P=p, step=0)

    bounds = BoundSpec.for_run(codag, p, cfg.beta)

    n = cfg.horizon
    rec_xi = np.empty((n + 1, codag.n_arcs))
    rec_w = np.empty((n + 1, codag.n_arcs))
    rec_p = np.empty((n + 1, codag.n_orig))
    rec_z = np.empty((n + 1, codag.n_arcs))
    rec_xi[0], rec_w[0], rec_p[0] = state.xi, state.W, state.P
    for step in range(n):
        state, z_used, _ = _step_core(state, codag, cfg, sampler, k_node)
        rec_z[step] = z_used
        row = step + 1
        rec_xi[row], rec_w[row], rec_p[row] = state.xi, state.W, state.P
    # cost-to-go of the final state closes out the bound audit
    rec_z[n] = cost_to_go(codag, state.W, state.P, cfg.beta).z

    _audit_trajectory(bounds, codag, rec_xi, rec_w, rec_p, rec_z)

    # Diagnostics, vectorized over the whole run.
    rec_worig = np.apply_along_axis(codag.aggregate_unchecked, 1, rec_w)
    if codag.net.all_affine:
        theta1, theta0 = codag.theta_arrays()
        integrals = (theta1 * rec_worig**2 / 2.0 + (theta0 + rec_p) * rec_worig).sum(axis=1)
        xlogx = np.where(rec_w > 0, rec_w * np.log(np.where(rec_w > 0, rec_w, 1.0)), 0.0)
        node_sums = np.add.reduceat(rec_w, codag.out_starts, axis=1)
        node_xlogx = np.where(
            node_sums > 0, node_sums * np.log(np.where(node_sums > 0, node_sums, 1.0)), 0.0
        )
        entropy = (
            np.add.reduceat(xlogx, codag.out_starts, axis=1).sum(axis=1)
            - node_xlogx.sum(axis=1)
        )
        f_vals = integrals + entropy / cfg.beta
    else:
        f_vals = np.array(
            [potential_F(codag, rec_w[row], rec_p[row], cfg.beta) for row in range(n + 1)]
        )

    dist_xi = np.full(n + 1, np.nan)
    dist_p = np.full(n + 1, np.nan)
    v_vals = np.full(n + 1, np.nan)
    if reference is not None:
        dist_xi = ((rec_xi - reference.xi_bar) ** 2).sum(axis=1)
        dist_p = ((rec_p - reference.p_bar) ** 2).sum(axis=1)
        if codag.net.all_affine:
            theta1 = codag.theta_arrays()[0]
            v_vals = 0.5 * ((rec_p - reference.p_bar) ** 2 / theta1).sum(axis=1)

    return SimTrace(
        codag=codag,
        config=cfg,
        steps=np.arange(n + 1),
        xi=rec_xi,
        W=rec_w,
        W_orig=rec_worig,
        P=rec_p,
        dist_xi=dist_xi,
        dist_p=dist_p,
        F=f_vals,
        V=v_vals,
        reference=reference,
        bounds=bounds,
    )


# --- continuous-time dynamics ----------------------------------------------


@dataclass
class FlowOdeTrajectory:
    kind = "flow"
    ts: np.ndarray
    xi: np.ndarray  # (n+1, |A|)
    w: np.ndarray  # (n+1, |A|)
    F: np.ndarray
    terminal_gap: float  # ||w(t_end) - equilibrium||_inf when available


@dataclass
class TollOdeTrajectory:
    kind = "toll"
    ts: np.ndarray
    p: np.ndarray  # (n+1, |A_O|)
    V: np.ndarray
    p_bar: np.ndarray
    dt: float


def _rk4(y: np.ndarray, rhs, dt: float) -> np.ndarray:
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * dt * k1)
    k3 = rhs(y + 0.5 * dt * k2)
    k4 = rhs(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_flow_ode(
    codag: CoDag,
    p,
    cfg: SimConfig,
    t_end: float,
    dt: float | None = None,
    w_ref: np.ndarray | None = None,
) -> FlowOdeTrajectory:
    """RK4 on the arc-selection ODE at fixed tolls p.

    Flows are reconstructed algebraically from xi at every right-hand
    side evaluation, so trajectories never leave the polytope.  The
    potential must be nonincreasing along the way; an increase beyond
    1e-8 per step aborts with StepTooLarge.
    """
    p = np.asarray(p, dtype=float)
    k_node = cfg.resolve_k(codag)
    k_max = float(k_node.max())
    if dt is None:
        dt = 1e-3 / k_max
    if dt > 0.01 / k_max:
        raise InvalidOptions(f"dt = {dt} exceeds 0.01 / max(K) = {0.01 / k_max:.6g}")
    k_arc = k_node[codag.arc_tail]

    def rhs(xi: np.ndarray) -> np.ndarray:
        w = propagate_flows_raw(codag, xi, codag.demand)
        br = logit_probs(codag, cost_to_go(codag, w, p, cfg.beta)).xi
        return k_arc * (br - xi)

    n = max(1, int(round(t_end / dt)))
    ts = np.linspace(0.0, n * dt, n + 1)
    xi = cfg.initial_xi(codag)
    xis = np.empty((n + 1, codag.n_arcs))
    ws = np.empty((n + 1, codag.n_arcs))
    fs = np.empty(n + 1)
    xis[0] = xi
    ws[0] = propagate_flows_raw(codag, xi, codag.demand)
    fs[0] = potential_F(codag, ws[0], p, cfg.beta)
    for i in range(n):
        xi = _rk4(xi, rhs, dt)
        xis[i + 1] = xi
        ws[i + 1] = propagate_flows_raw(codag, xi, codag.demand)
        fs[i + 1] = potential_F(codag, ws[i + 1], p, cfg.beta)
        if fs[i + 1] > fs[i] + 1e-8:
            raise StepTooLarge(
                f"potential increased by {fs[i + 1] - fs[i]:.3e} at t = {ts[i + 1]:.6g}; "
                "reduce dt"
            )
    gap = float(np.max(np.abs(ws[-1] - w_ref))) if w_ref is not None else np.nan
    return FlowOdeTrajectory(ts=ts, xi=xis, w=ws, F=fs, terminal_gap=gap)


def integrate_toll_ode(
    codag: CoDag,
    p0,
    beta: float,
    t_end: float,
    dt: float = 0.01,
    p_bar: np.ndarray | None = None,
) -> TollOdeTrajectory:
    """RK4 on the slow toll ODE with equilibrium flows at every evaluation.

    Tracks V(p) = 0.5 (p - p_bar)^T diag(theta1)^{-1} (p - p_bar), which
    must contract at least as fast as exp(-2t); slower decay raises
    LyapunovViolation.  Inner equilibrium solves are warm-started from
    the previous one.
    """
    from .equilibrium import SolverOptions, solve_equilibrium
    from .tolling import solve_optimal_toll

    if not codag.net.all_affine:
        raise NonAffineLatency("the toll ODE requires affine latencies")
    theta1, _ = codag.theta_arrays()
    p = np.asarray(p0, dtype=float).copy()
    if p_bar is None:
        p_bar = solve_optimal_toll(codag, beta).p_bar.p

    eq_opts = SolverOptions()
    warm: dict[str, np.ndarray | None] = {"w": None}

    def rhs(pv: np.ndarray) -> np.ndarray:
        eq = solve_equilibrium(codag, pv, beta, opts=eq_opts, w0=warm["w"])
        warm["w"] = eq.w_bar.w
        w_orig = aggregate_flow(codag, eq.w_bar.w)
        return -pv + w_orig * theta1

    def lyap(pv: np.ndarray) -> float:
        diff = pv - p_bar
        return 0.5 * float(np.sum(diff * diff / theta1))

    n = max(1, int(round(t_end / dt)))
    ts = np.linspace(0.0, n * dt, n + 1)
    ps = np.empty((n + 1, codag.n_orig))
    vs = np.empty(n + 1)
    ps[0] = p
    vs[0] = lyap(p)
    floor = 1e-15 * (1.0 + vs[0])
    decay = np.exp(-2.0 * dt) * (1.0 + 1e-6)
    for i in range(n):
        p = _rk4(p, rhs, dt)
        ps[i + 1] = p
        vs[i + 1] = lyap(p)
        if vs[i + 1] > vs[i] * decay + floor:
            raise LyapunovViolation(
                f"V grew from {vs[i]:.6e} to {vs[i + 1]:.6e} over dt = {dt} "
                f"at t = {ts[i + 1]:.6g}"
            )
    return TollOdeTrajectory(ts=ts, p=ps, V=vs, p_bar=p_bar, dt=dt)


@dataclass
class LyapunovReport:
    kind: str
    values: np.ndarray
    max_increase: float
    fitted_rate: float | None
    passed: bool
    detail: str


def lyapunov_report(trajectory) -> LyapunovReport:
    """Descent/contraction summary for an integrated trajectory."""
    if isinstance(trajectory, FlowOdeTrajectory):
        f = trajectory.F
        diffs = np.diff(f)
        max_inc = float(diffs.max(initial=0.0))
        passed = max_inc <= 1e-8
        return LyapunovReport(
            kind="flow",
            values=f,
            max_increase=max_inc,
            fitted_rate=None,
            passed=passed,
            detail=f"max per-step potential increase {max_inc:.3e}",
        )
    if isinstance(trajectory, TollOdeTrajectory):
        v = trajectory.V
        ts = trajectory.ts
        diffs = np.diff(v)
        max_inc = float(diffs.max(initial=0.0))
        decay = np.exp(-2.0 * trajectory.dt) * (1.0 + 1e-6)
        floor = 1e-15 * (1.0 + v[0])
        per_step_ok = bool(np.all(v[1:] <= v[:-1] * decay + floor))
        mask = v > max(v[0] * 1e-12, 1e-300)
        fitted = None
        rate_ok = True
        if v[0] > 0 and mask.sum() >= 3:
            coeffs = np.polyfit(ts[mask], np.log(v[mask]), 1)
            fitted = float(coeffs[0])
            rate_ok = fitted <= -2.0 + 0.05
        return LyapunovReport(
            kind="toll",
            values=v,
            max_increase=max_inc,
            fitted_rate=fitted,
            passed=per_step_ok and rate_ok,
            detail=(
                f"per-step exponential bound {'holds' if per_step_ok else 'fails'}; "
                f"fitted decay rate {fitted}"
            ),
        )
    raise InvalidOptions(f"unknown trajectory type {type(trajectory)!r}")


def suggest_k(codag: CoDag, ratio: float) -> np.ndarray:
    """Node gains satisfying K_i > ratio * max(K over incoming-arc tails).

    The sufficient condition for flow-ODE convergence scales gains up
    along the topological order by at least the given factor; with the
    proven (demand / C_w) factor the cascade is astronomically steep,
    so callers choose a practical ratio.  Returned gains start at 1 at
    the origin.
    """
    if ratio <= 1.0:
        raise InvalidOptions("ratio must exceed 1")
    k = np.ones(codag.n_nodes)
    for node in range(codag.n_nodes):
        tails = {int(codag.arc_tail[a]) for a in codag.in_arcs[node]}
        if tails:
            k[node] = ratio * max(k[t] for t in tails)
    return k
