"""Equilibrium fixed point, potential minimization, and social optimum."""

import math

import numpy as np
import pytest

from tolldag.equilibrium import (
    FlowPolytopePoint,
    SolverOptions,
    first_order_gap,
    grad_potential,
    minimize_potential,
    potential_F,
    random_feasible_flows,
    solve_equilibrium,
    solve_social_optimum,
)
from tolldag.errors import InvalidOptions, NegativeFlow, NonConvergence
from tolldag.network import build_codag

from .conftest import (
    bisect_parallel_asym,
    golden_section,
    make_affine_net,
    make_random_network,
    social_objective_parallel_asym,
)

BETA = 10.0


def parallel_asym():
    net = make_affine_net(
        ["o", "d"], [("a1", "o", "d"), ("a2", "o", "d")], [(1.0, 0.0), (2.0, 0.0)]
    )
    return net, build_codag(net)


class TestPotential:
    def test_single_arc_closed_form(self):
        net = make_affine_net(["o", "d"], [("a1", "o", "d")], [(2.0, 1.0)])
        codag = build_codag(net)
        # one outgoing arc per node: the entropy term vanishes
        assert potential_F(codag, np.array([1.0]), np.array([0.0]), BETA) == pytest.approx(2.0)

    def test_two_parallel_closed_form(self):
        net = make_affine_net(
            ["o", "d"], [("a1", "o", "d"), ("a2", "o", "d")], [(1.0, 0.0)] * 2
        )
        codag = build_codag(net)
        val = potential_F(codag, np.array([0.5, 0.5]), np.zeros(2), BETA)
        assert val == pytest.approx(0.25 - math.log(2.0) / 10.0)
        assert val == pytest.approx(0.180685, abs=1e-6)

    def test_toll_enters_linearly(self):
        net = make_affine_net(["o", "d"], [("a1", "o", "d")], [(2.0, 1.0)])
        codag = build_codag(net)
        base = potential_F(codag, np.array([1.0]), np.array([0.0]), BETA)
        tolled = potential_F(codag, np.array([1.0]), np.array([0.7]), BETA)
        assert tolled - base == pytest.approx(0.7)

    def test_negative_flow_rejected(self):
        net = make_affine_net(["o", "d"], [("a1", "o", "d")], [(2.0, 1.0)])
        codag = build_codag(net)
        with pytest.raises(NegativeFlow):
            potential_F(codag, np.array([-0.1]), np.array([0.0]), BETA)

    def test_equilibrium_dominates_random_feasible(self, diamond):
        _, codag = diamond
        res = solve_equilibrium(codag, np.zeros(codag.n_orig), BETA)
        rng = np.random.default_rng(0)
        f_star = res.potential
        for w in random_feasible_flows(codag, rng, 200):
            assert potential_F(codag, w, np.zeros(codag.n_orig), BETA) >= f_star - 1e-12


class TestSolveEquilibrium:
    def test_single_arc_forced_flow(self):
        net = make_affine_net(["o", "d"], [("a1", "o", "d")], [(2.0, 1.0)], demand=1.0)
        codag = build_codag(net)
        for toll in (0.0, 1.0, 10.0):
            res = solve_equilibrium(codag, np.array([toll]), BETA)
            assert res.w_bar.w[0] == pytest.approx(1.0, abs=1e-12)

    def test_symmetric_parallel_splits_evenly(self):
        net = make_affine_net(
            ["o", "d"], [("a1", "o", "d"), ("a2", "o", "d")], [(1.0, 0.0)] * 2
        )
        codag = build_codag(net)
        res = solve_equilibrium(codag, np.zeros(2), BETA)
        assert np.allclose(res.w_bar.w, 0.5, atol=1e-10)

    def test_asymmetric_matches_bisection_oracle(self):
        _, codag = parallel_asym()
        res = solve_equilibrium(codag, np.zeros(2), BETA)
        w_star = bisect_parallel_asym(BETA)
        k = list(codag.arc_ids).index("a1")
        assert res.w_bar.w[k] == pytest.approx(w_star, abs=1e-8)
        assert res.vi_residual <= 1e-6
        assert res.fixed_point_residual <= 1e-10

    def test_flow_in_polytope(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            codag = build_codag(make_random_network(rng))
            p = rng.uniform(0.0, 1.0, size=codag.n_orig)
            res = solve_equilibrium(codag, p, BETA)
            assert res.w_bar.in_polytope(codag, rtol=1e-10)
            # proven flow floor: equilibrium flows stay away from zero
            assert res.w_bar.w.min() > 0

    def test_xi_bar_are_flow_ratios(self, diamond):
        _, codag = diamond
        res = solve_equilibrium(codag, np.zeros(codag.n_orig), BETA)
        sums = codag.per_arc(codag.segment_sums(res.w_bar.w))
        assert np.allclose(res.xi_bar.xi, res.w_bar.w / sums, atol=1e-12)

    def test_fixed_point_matches_direct_minimization(self):
        # draws are kept to scales whose equilibria the first-order
        # certificate can resolve in double precision: starved subtrees
        # (arc flows under ~1e-9) have don't-care split ratios the
        # direct route cannot certify through the objective
        rng = np.random.default_rng(8)
        checked = 0
        while checked < 50:
            codag = build_codag(make_random_network(rng))
            p = rng.uniform(0.0, 0.5, size=codag.n_orig)
            fp = solve_equilibrium(codag, p, BETA)
            if fp.w_bar.w.min() < 1e-9:
                continue
            direct = minimize_potential(codag, p, BETA, gap_tol=1e-9)
            assert np.max(np.abs(fp.w_bar.w - direct.w_bar.w)) <= 1e-7
            checked += 1

    def test_warm_start_converges_fast(self, paper9):
        _, codag = paper9
        p = np.full(codag.n_orig, 0.3)
        first = solve_equilibrium(codag, p, BETA)
        again = solve_equilibrium(codag, p, BETA, w0=first.w_bar.w)
        assert again.iterations <= 5

    def test_invalid_options(self, diamond):
        _, codag = diamond
        with pytest.raises(InvalidOptions):
            solve_equilibrium(codag, np.zeros(codag.n_orig), BETA, opts=SolverOptions(tol=-1.0))
        with pytest.raises(InvalidOptions):
            solve_equilibrium(
                codag, np.zeros(codag.n_orig), BETA, opts=SolverOptions(damping=0.0)
            )
        with pytest.raises(InvalidOptions):
            solve_equilibrium(codag, np.zeros(codag.n_orig), beta=-1.0)

    def test_nonconvergence_raises(self, paper9):
        _, codag = paper9
        with pytest.raises(NonConvergence) as exc:
            solve_equilibrium(
                codag,
                np.zeros(codag.n_orig),
                BETA,
                opts=SolverOptions(max_iter=2),
            )
        assert exc.value.iterations == 2


class TestMonotonicityAndSmoothness:
    def test_monotone_in_tolls(self):
        rng = np.random.default_rng(12)
        checked = 0
        while checked < 100:
            codag = build_codag(make_random_network(rng))
            for _ in range(5):
                p = rng.uniform(0.0, 2.0, size=codag.n_orig)
                q = rng.uniform(0.0, 2.0, size=codag.n_orig)
                wp = solve_equilibrium(codag, p, BETA).w_bar.w
                wq = solve_equilibrium(codag, q, BETA).w_bar.w
                inner = float(np.dot(wq - wp, (q - p)[codag.arc_orig]))
                assert inner <= 1e-9
                checked += 1

    def test_smooth_in_tolls(self):
        """Central differences stabilize under step halving (C1 probe)."""
        rng = np.random.default_rng(21)
        stable = 0
        for _ in range(20):
            codag = build_codag(make_random_network(rng))
            p = rng.uniform(0.2, 1.5, size=codag.n_orig)
            direction = rng.normal(size=codag.n_orig)
            direction /= np.linalg.norm(direction)
            tight = SolverOptions(tol=1e-13)

            def dderiv(h):
                wp = solve_equilibrium(codag, p + h * direction, BETA, opts=tight).w_bar.w
                wm = solve_equilibrium(codag, p - h * direction, BETA, opts=tight).w_bar.w
                return (wp - wm) / (2.0 * h)

            d1 = dderiv(1e-4)
            d2 = dderiv(5e-5)
            scale = max(np.max(np.abs(d1)), 1e-12)
            assert np.max(np.abs(d1 - d2)) <= 0.05 * scale
            stable += 1
        assert stable == 20


class TestSocialOptimum:
    def test_single_arc(self):
        net = make_affine_net(["o", "d"], [("a1", "o", "d")], [(2.0, 1.0)])
        codag = build_codag(net)
        res = solve_social_optimum(codag, BETA)
        assert res.w_bar.w[0] == pytest.approx(1.0, abs=1e-10)

    def test_two_identical_split_evenly(self):
        net = make_affine_net(
            ["o", "d"], [("a1", "o", "d"), ("a2", "o", "d")], [(1.0, 0.0)] * 2
        )
        codag = build_codag(net)
        res = solve_social_optimum(codag, BETA)
        assert np.allclose(res.w_bar.w, 0.5, atol=1e-9)

    def test_asymmetric_matches_golden_section(self):
        _, codag = parallel_asym()
        res = solve_social_optimum(codag, BETA)
        w_star = golden_section(social_objective_parallel_asym(BETA), 1e-9, 1.0 - 1e-9)
        k = list(codag.arc_ids).index("a1")
        assert res.w_bar.w[k] == pytest.approx(w_star, abs=1e-8)
        assert res.first_order_gap <= 1e-6

    def test_gap_certificate_zero_at_optimum(self, diamond):
        _, codag = diamond
        res = solve_social_optimum(codag, BETA)
        assert res.first_order_gap <= 1e-8
        # moving away from the optimum produces a positive gap
        rng = np.random.default_rng(1)
        w = random_feasible_flows(codag, rng, 1)[0]
        gap = first_order_gap(codag, w, grad_potential(codag, w, np.zeros(codag.n_orig), BETA))
        assert gap > 0


class TestFlowPolytopePoint:
    def test_residual_detects_violation(self, diamond):
        _, codag = diamond
        good = random_feasible_flows(codag, np.random.default_rng(2), 1)[0]
        assert FlowPolytopePoint(good).in_polytope(codag)
        bad = good.copy()
        bad[0] += 0.5
        assert not FlowPolytopePoint(bad).in_polytope(codag)
