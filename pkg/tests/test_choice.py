"""Latency, logit choice, and the cost-to-go recursion."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tolldag.choice import (
    cost_to_go,
    latency,
    logit_probs,
    marginal_latency,
    smoothed_min,
    softmax_choice,
)
from tolldag.equilibrium import solve_equilibrium, random_feasible_flows
from tolldag.errors import NegativeFlow, NonFiniteInput
from tolldag.network import AffineLatency, build_codag, enumerate_acyclic_routes

from .conftest import make_affine_net, make_random_network


class TestLatency:
    def test_affine_values(self):
        fn = AffineLatency(theta1=2.0, theta0=1.0)
        assert latency(fn, 0.5) == pytest.approx(2.0)
        assert marginal_latency(fn, 0.5) == pytest.approx(2.0)

    def test_boundary(self):
        fn = AffineLatency(theta1=1.0, theta0=0.0)
        assert latency(fn, 0.0) == 0.0
        assert marginal_latency(fn, 0.0) == 1.0

    def test_paper9_first_arc(self, paper9):
        net, _ = paper9
        fn = net.latency["a1"]
        assert latency(fn, 1.0) == pytest.approx(2.0)

    def test_negative_flow_rejected(self):
        with pytest.raises(NegativeFlow):
            latency(AffineLatency(1.0, 0.0), -0.1)
        with pytest.raises(NegativeFlow):
            marginal_latency(AffineLatency(1.0, 0.0), -0.1)


class TestCostToGo:
    def test_single_arc_base_case(self):
        net = make_affine_net(["o", "d"], [("a1", "o", "d")], [(2.0, 1.0)])
        codag = build_codag(net)
        ctg = cost_to_go(codag, np.array([0.5]), np.array([0.25]), beta=10.0)
        assert ctg.z[0] == pytest.approx(2.25)

    def test_interior_arc_equal_downstream(self):
        # o -> m (s+p = 1), then two identical arcs m -> d with z' = 1
        net = make_affine_net(
            ["o", "m", "d"],
            [("up", "o", "m"), ("l", "m", "d"), ("r", "m", "d")],
            [(1.0, 0.5), (1.0, 0.5), (1.0, 0.5)],
        )
        codag = build_codag(net)
        # flows: up carries 1, each lower arc 0.5 -> s_up = 1.5? pick
        # flows giving s+p = 1 on up and z = 1 on both lower arcs:
        # lower arcs carry 0.5 each -> s = 1.0, p = 0; up carries w with
        # s_up = w + 0.5, choose w = 0.5 and toll 0 -> s+p = 1.
        w = np.zeros(codag.n_arcs)
        idx = {aid: k for k, aid in enumerate(codag.arc_ids)}
        w[idx["up"]] = 0.5
        w[idx["l"]] = 0.5
        w[idx["r"]] = 0.5
        ctg = cost_to_go(codag, w, np.zeros(3), beta=10.0)
        assert ctg.z[idx["l"]] == pytest.approx(1.0)
        assert ctg.z[idx["up"]] == pytest.approx(1.0 + 1.0 - math.log(2.0) / 10.0)
        assert ctg.z[idx["up"]] == pytest.approx(1.930685, abs=1e-6)

    def test_origin_phi_matches_route_enumeration(self):
        """exp(-beta*phi_o) telescopes into the sum over routes of exp(-beta*cost)."""
        rng = np.random.default_rng(31)
        beta = 10.0
        for _ in range(10):
            net = make_random_network(rng)
            codag = build_codag(net)
            w = random_feasible_flows(codag, rng, 1)[0]
            p = rng.uniform(0.0, 1.0, size=codag.n_orig)
            ctg = cost_to_go(codag, w, p, beta)
            w_orig = np.zeros(codag.n_orig)
            np.add.at(w_orig, codag.arc_orig, w)
            orig_index = {a: j for j, a in enumerate(net.arc_ids)}
            costs = {
                a: float(net.latency[a](w_orig[orig_index[a]])) + p[orig_index[a]]
                for a in net.arc_ids
            }
            route_costs = [
                sum(costs[a] for a in route) for route in enumerate_acyclic_routes(net)
            ]
            expected = smoothed_min(np.array(route_costs), beta)
            assert ctg.phi[codag.origin_idx] == pytest.approx(expected, rel=1e-10)

    def test_origin_phi_matches_routes_at_equilibrium(self, diamond):
        _, codag = diamond
        beta = 10.0
        p = np.zeros(codag.n_orig)
        res = solve_equilibrium(codag, p, beta)
        w_orig = np.zeros(codag.n_orig)
        np.add.at(w_orig, codag.arc_orig, res.w_bar.w)
        net = codag.net
        orig_index = {a: j for j, a in enumerate(net.arc_ids)}
        costs = {a: float(net.latency[a](w_orig[orig_index[a]])) for a in net.arc_ids}
        route_costs = [
            sum(costs[a] for a in route) for route in enumerate_acyclic_routes(net)
        ]
        assert res.z.phi[codag.origin_idx] == pytest.approx(
            smoothed_min(np.array(route_costs), beta), rel=1e-10
        )

    def test_non_finite_rejected(self, diamond):
        _, codag = diamond
        with pytest.raises(NonFiniteInput):
            cost_to_go(codag, np.full(codag.n_arcs, np.nan), np.zeros(codag.n_orig), 10.0)
        with pytest.raises(NonFiniteInput):
            cost_to_go(
                codag, np.ones(codag.n_arcs), np.full(codag.n_orig, np.inf), 10.0
            )


class TestLogitProbs:
    def test_equal_costs_uniform(self):
        net = make_affine_net(
            ["o", "d"],
            [("a1", "o", "d"), ("a2", "o", "d"), ("a3", "o", "d")],
            [(1.0, 0.0)] * 3,
        )
        codag = build_codag(net)
        ctg = cost_to_go(codag, np.ones(3) / 3, np.zeros(3), beta=10.0)
        xi = logit_probs(codag, ctg).xi
        assert np.allclose(xi, 1.0 / 3.0)

    def test_two_way_logistic(self):
        # softmax over z = (0, 0.1) at beta = 10: sigmoid of the gap
        net = make_affine_net(
            ["o", "d"], [("a1", "o", "d"), ("a2", "o", "d")], [(1.0, 0.0)] * 2
        )
        codag = build_codag(net)
        xi = softmax_choice(codag, np.array([0.0, 0.1]), beta=10.0)
        assert xi[0] == pytest.approx(0.731059, abs=1e-6)
        assert xi[1] == pytest.approx(0.268941, abs=1e-6)

    def test_large_beta_concentrates(self):
        net = make_affine_net(
            ["o", "d"], [("a1", "o", "d"), ("a2", "o", "d")], [(1.0, 0.0)] * 2
        )
        codag = build_codag(net)
        xi = softmax_choice(codag, np.array([1.0, 1.5]), beta=1e6)
        assert xi[0] >= 1.0 - 1e-6
        assert xi.sum() == pytest.approx(1.0)

    @given(seed=st.integers(0, 10**6), beta=st.floats(0.1, 20.0))
    @settings(max_examples=30, deadline=None)
    def test_simplex_property(self, seed, beta):
        rng = np.random.default_rng(seed)
        net = make_random_network(rng)
        codag = build_codag(net)
        z = rng.normal(0.0, 2.0, size=codag.n_arcs)
        xi = softmax_choice(codag, z, beta)
        assert np.all(xi > 0)
        sums = codag.segment_sums(xi)
        assert np.allclose(sums, 1.0, atol=1e-12)


class TestStabilityAndShifts:
    def test_huge_toll_shift_no_overflow(self, diamond):
        _, codag = diamond
        beta = 10.0
        w = np.full(codag.n_arcs, 0.25)
        base = cost_to_go(codag, w, np.zeros(codag.n_orig), beta)
        shift = 1e4
        shifted = cost_to_go(codag, w, np.full(codag.n_orig, shift), beta)
        assert np.all(np.isfinite(shifted.z))
        # arcs into the destination move by exactly the toll shift
        into_d = [
            k for k in range(codag.n_arcs) if codag.arc_head[k] == codag.destination_idx
        ]
        assert np.allclose(shifted.z[into_d] - base.z[into_d], shift)
        # every arc moves by at least one and at most l(G) shifts
        delta = shifted.z - base.z
        assert np.all(delta >= shift - 1e-6)
        assert np.all(delta <= codag.max_route_len * shift + 1e-6)

    def test_path_graph_shift_counts_hops(self):
        net = make_affine_net(
            ["o", "m", "d"],
            [("a1", "o", "m"), ("a2", "m", "d")],
            [(1.0, 0.0), (1.0, 0.0)],
        )
        codag = build_codag(net)
        w = np.ones(2)
        base = cost_to_go(codag, w, np.zeros(2), 10.0)
        c = 1e4
        shifted = cost_to_go(codag, w, np.full(2, c), 10.0)
        idx = {aid: k for k, aid in enumerate(codag.arc_ids)}
        assert shifted.z[idx["a2"]] - base.z[idx["a2"]] == pytest.approx(c)
        assert shifted.z[idx["a1"]] - base.z[idx["a1"]] == pytest.approx(2 * c)

    def test_softmax_invariant_under_common_shift(self):
        rng = np.random.default_rng(2)
        net = make_affine_net(
            ["o", "d"],
            [(f"a{k}", "o", "d") for k in range(1, 5)],
            [(1.0, 0.0)] * 4,
        )
        codag = build_codag(net)
        z = rng.normal(size=4)
        xi = softmax_choice(codag, z, beta=10.0)
        xi_shifted = softmax_choice(codag, z + 123.456, beta=10.0)
        assert np.allclose(xi, xi_shifted, atol=1e-12)
        assert np.argmax(xi) == np.argmax(xi_shifted)

    def test_phi_gradient_is_choice_probability(self):
        """Central differences of the smoothed minimum recover the softmax."""
        rng = np.random.default_rng(9)
        beta = 10.0
        for _ in range(100):
            n = int(rng.integers(2, 6))
            z = rng.normal(0.0, 2.0, size=n)
            probs = np.exp(-beta * (z - z.min()))
            probs /= probs.sum()
            h = 1e-5
            for i in range(n):
                zp, zm = z.copy(), z.copy()
                zp[i] += h
                zm[i] -= h
                fd = (smoothed_min(zp, beta) - smoothed_min(zm, beta)) / (2 * h)
                assert fd == pytest.approx(probs[i], rel=1e-6, abs=1e-9)
