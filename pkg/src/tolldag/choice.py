"""Latency evaluation, logit arc choice, and the cost-to-go recursion.

Cost-to-go values are computed backward from the destination.  An arc
entering the destination costs its latency plus toll; any other arc
additionally inherits the smoothed minimum over its head node's
outgoing arcs,

    z_a = s(w) + p - (1/beta) * ln sum_a' exp(-beta * z_a'),

evaluated with max-subtracted logsumexp so that large beta or large
costs never overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NegativeFlow, NonFiniteInput
from .network import CoDag, LatencyFn, aggregate_flow


def latency(fn: LatencyFn, w) -> float | np.ndarray:
    """Travel time on an arc carrying flow ``w``."""
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise NegativeFlow(f"flow must be nonnegative, got {w}")
    result = fn(w)
    return float(result) if np.ndim(result) == 0 else result


def marginal_latency(fn: LatencyFn, w) -> float | np.ndarray:
    """Derivative ds/dw at flow ``w``."""
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise NegativeFlow(f"flow must be nonnegative, got {w}")
    result = fn.deriv(w)
    return float(result) if np.ndim(result) == 0 else result


@dataclass
class CostToGo:
    """Per-arc cost-to-go z and per-node smoothed minimum phi."""

    z: np.ndarray  # per CoDAG arc
    phi: np.ndarray  # per CoDAG node; 0 at the destination
    beta: float


@dataclass
class ChoiceProbs:
    """Per-arc selection probabilities; sums to 1 over each node's arcs."""

    xi: np.ndarray


def smoothed_min(z: np.ndarray, beta: float) -> float:
    """(-1/beta) * ln sum exp(-beta z), stabilized by min-subtraction."""
    m = float(np.min(z))
    return m - math.log(float(np.sum(np.exp(-beta * (np.asarray(z) - m))))) / beta


def arc_costs(codag: CoDag, w: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Instantaneous cost s(w_[a]) + p_[a] per CoDAG arc."""
    w_orig = aggregate_flow(codag, w)
    p = np.asarray(p, dtype=float)
    if p.shape != (codag.n_orig,):
        raise DimensionMismatch(
            f"expected {codag.n_orig} tolls, got shape {p.shape}"
        )
    return (codag.latency_values(w_orig) + p)[codag.arc_orig]


def backward_pass(codag: CoDag, costs: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """(z, phi) from per-arc instantaneous costs; no validation."""
    z = np.empty(codag.n_arcs)
    phi = np.zeros(codag.n_nodes)
    starts = codag.out_starts
    n_seg = len(starts)
    n_arcs = codag.n_arcs
    heads = codag.arc_head
    for k in range(n_seg - 1, -1, -1):
        s = starts[k]
        e = starts[k + 1] if k + 1 < n_seg else n_arcs
        seg = costs[s:e] + phi[heads[s:e]]
        z[s:e] = seg
        m = seg.min()
        phi[k] = m - math.log(np.exp(-beta * (seg - m)).sum()) / beta
    return z, phi


def cost_to_go(codag: CoDag, w: np.ndarray, p: np.ndarray, beta: float) -> CostToGo:
    """Backward recursion for expected minimum cost-to-go."""
    w = np.asarray(w, dtype=float)
    p = np.asarray(p, dtype=float)
    if not (np.isfinite(w).all() and np.isfinite(p).all()):
        raise NonFiniteInput("flows and tolls must be finite")
    if beta <= 0:
        raise NonFiniteInput(f"beta must be positive, got {beta}")
    z, phi = backward_pass(codag, arc_costs(codag, w, p), beta)
    return CostToGo(z=z, phi=phi, beta=beta)


def softmax_choice(codag: CoDag, z: np.ndarray, beta: float) -> np.ndarray:
    """Per-node softmax of -beta*z as a bare array; no validation."""
    zmin = np.minimum.reduceat(z, codag.out_starts)
    ex = np.exp(-beta * (z - codag.per_arc(zmin)))
    return ex / codag.per_arc(codag.segment_sums(ex))


def logit_probs(codag: CoDag, ctg: CostToGo) -> ChoiceProbs:
    """Softmax of -beta*z over each node's outgoing arcs."""
    if not np.isfinite(ctg.z).all():
        raise NonFiniteInput("cost-to-go contains non-finite values")
    return ChoiceProbs(xi=softmax_choice(codag, ctg.z, ctg.beta))


def logit_response(codag: CoDag, w: np.ndarray, p: np.ndarray, beta: float) -> np.ndarray:
    """Choice probabilities induced by flows w and tolls p, as one array."""
    return logit_probs(codag, cost_to_go(codag, w, p, beta)).xi
