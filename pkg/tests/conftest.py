"""Shared fixtures: benchmark networks, random-network generator, oracles."""

from __future__ import annotations

import math

import numpy as np
import pytest

from tolldag.cli import BUILTIN_NETWORKS
from tolldag.network import AffineLatency, OriginalNetwork, build_codag


def make_affine_net(nodes, arcs, theta, origin="o", destination="d", demand=1.0):
    """arcs: [(id, tail, head)]; theta: [(theta1, theta0)] matching arcs."""
    latency = {a[0]: AffineLatency(t1, t0) for a, (t1, t0) in zip(arcs, theta)}
    return OriginalNetwork(
        nodes=tuple(nodes),
        arcs=tuple(arcs),
        origin=origin,
        destination=destination,
        demand=demand,
        latency=latency,
    )


def make_random_network(rng: np.random.Generator, max_nodes=7, max_arcs=14):
    """Small random network with a guaranteed origin->destination path.

    Mixes in bidirectional pairs and occasional parallel arcs, the
    structures the condensed DAG has to get right.
    """
    n_inner = int(rng.integers(0, max_nodes - 1))
    nodes = ["o"] + [f"n{k}" for k in range(n_inner)] + ["d"]
    spine = ["o"] + list(rng.permutation([f"n{k}" for k in range(n_inner)])) + ["d"]
    arcs = []
    for u, v in zip(spine[:-1], spine[1:]):
        arcs.append((f"a{len(arcs) + 1}", u, v))
    n_extra = int(rng.integers(0, max(1, max_arcs - len(arcs) + 1)))
    for _ in range(n_extra):
        if len(arcs) >= max_arcs:
            break
        u, v = rng.choice(nodes, size=2, replace=False)
        if v == "o" or u == "d":
            u, v = v, u
        if u == v or u == "d" or v == "o":
            continue
        arcs.append((f"a{len(arcs) + 1}", u, v))
        # sometimes close the pair to create a bidirectional arc
        if rng.random() < 0.35 and len(arcs) < max_arcs and v != "d" and u != "o":
            arcs.append((f"a{len(arcs) + 1}", v, u))
    theta = [
        (float(rng.uniform(0.5, 2.5)), float(rng.uniform(0.0, 1.5))) for _ in arcs
    ]
    demand = float(rng.uniform(0.5, 2.0))
    return make_affine_net(nodes, arcs, theta, demand=demand)


def bisect_parallel_asym(beta: float, tol: float = 1e-12) -> float:
    """Flow on the cheaper of two parallel arcs s1=w, s2=2w at zero toll.

    Solves w = 1 / (1 + exp(-beta*(2(1-w) - w))) by bisection; the gap
    function is strictly increasing in w.
    """
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid - 1.0 / (1.0 + math.exp(-beta * (2.0 * (1.0 - mid) - mid))) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def golden_section(f, lo: float, hi: float, tol: float = 1e-12) -> float:
    """Minimize a unimodal scalar function by golden-section search."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def social_objective_parallel_asym(beta: float):
    """Definition-2 objective restricted to the asymmetric two-arc network."""

    def f(w):
        return (
            w * w
            + 2.0 * (1.0 - w) ** 2
            + (w * math.log(w) + (1.0 - w) * math.log(1.0 - w)) / beta
        )

    return f


def codag_index_routes(codag):
    """All origin->destination CoDAG paths as tuples of arc indices."""
    routes = []

    def walk(node, prefix):
        if node == codag.destination_idx:
            routes.append(tuple(prefix))
            return
        for a in codag.out_arcs[node]:
            prefix.append(a)
            walk(codag.arc_head[a], prefix)
            prefix.pop()

    walk(codag.origin_idx, [])
    return routes


@pytest.fixture(scope="session")
def benchmarks():
    """name -> (net, codag) for every builtin benchmark network."""
    out = {}
    for name, factory in BUILTIN_NETWORKS.items():
        net = factory()
        out[name] = (net, build_codag(net))
    return out


@pytest.fixture(scope="session")
def paper9(benchmarks):
    return benchmarks["paper9"]


@pytest.fixture(scope="session")
def diamond(benchmarks):
    return benchmarks["diamond"]
