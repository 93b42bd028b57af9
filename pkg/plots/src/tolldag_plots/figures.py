"""Figure rendering: trajectories over time and before/after toll bars.

Data handed to matplotlib is taken from the trace/result files as-is
(no resampling or smoothing), so rendered artists can be checked
against the inputs exactly.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .io import NetworkMismatch, TraceFrame, same_network

_PALETTE = plt.rcParams["axes.prop_cycle"].by_key()["color"]


def _tail_colors(keys, tail_of):
    """Stable color per tail node; arcs sharing a tail share a color."""
    tails = []
    for key in keys:
        tail = tail_of(key)
        if tail not in tails:
            tails.append(tail)
    return {key: _PALETTE[tails.index(tail_of(key)) % len(_PALETTE)] for key in keys}


def plot_trajectories(trace: TraceFrame, out_path, result: dict | None = None):
    """Selection probabilities, flows, and tolls against the step index.

    One line per CoDAG arc on the first two panels and one per original
    arc on the toll panel; arcs leaving the same node share a color.
    When a result document is given, dashed horizontal lines mark the
    reference operating point.
    """
    arc_ids = trace.arc_ids
    codag_arcs = {a["id"]: a for a in result.get("codag", {}).get("arcs", [])} if result else {}
    net_arcs = {a["id"]: a for a in result.get("network", {}).get("arcs", [])} if result else {}

    def codag_tail(arc_id):
        return codag_arcs.get(arc_id, {}).get("tail", arc_id)

    def orig_of(arc_id):
        return codag_arcs.get(arc_id, {}).get("orig")

    colors = _tail_colors(arc_ids, codag_tail)

    fig, (ax_xi, ax_w, ax_p) = plt.subplots(3, 1, sharex=True, figsize=(8, 9))
    steps = trace.arc_series(arc_ids[0], "step").to_numpy()
    marker = "o" if len(steps) == 1 else None

    for arc_id in arc_ids:
        color = colors[arc_id]
        ax_xi.plot(
            steps, trace.arc_series(arc_id, "xi").to_numpy(),
            color=color, marker=marker, label=arc_id,
        )
        ax_w.plot(
            steps, trace.arc_series(arc_id, "W").to_numpy(),
            color=color, marker=marker, label=arc_id,
        )

    # tolls live on original arcs; deduplicate CoDAG copies
    seen = []
    for arc_id in arc_ids:
        orig = orig_of(arc_id) or arc_id
        if orig in seen:
            continue
        seen.append(orig)
        tail = net_arcs.get(orig, {}).get("tail", codag_tail(arc_id))
        color = _PALETTE[
            sorted({net_arcs.get(o, {}).get("tail", o) for o in seen}).index(tail)
            % len(_PALETTE)
        ] if net_arcs else colors[arc_id]
        ax_p.plot(
            steps, trace.arc_series(arc_id, "P").to_numpy(),
            color=color, marker=marker, label=str(orig),
        )

    if result:
        reference = result.get("reference", {})
        for arc_id, value in reference.get("xi_bar", {}).items():
            if arc_id in colors:
                ax_xi.axhline(value, color=colors[arc_id], linestyle="--", linewidth=0.8)
        for orig, value in reference.get("p_bar", {}).items():
            ax_p.axhline(value, color="gray", linestyle="--", linewidth=0.8)

    ax_xi.set_ylabel("selection probability")
    ax_w.set_ylabel("arc flow")
    ax_p.set_ylabel("toll")
    ax_p.set_xlabel("step")
    for ax in (ax_xi, ax_w, ax_p):
        ax.legend(loc="upper right", fontsize="x-small", ncols=2)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_before_after(result_a: dict, result_b: dict, out_path):
    """Paired bars of per-original-arc flows for two solves of one network."""
    if not same_network(result_a, result_b):
        raise NetworkMismatch("the two results reference different networks")
    arcs = [a["id"] for a in result_a["network"]["arcs"]]
    flows_a = np.array([result_a["w_orig"][str(a)] for a in arcs])
    flows_b = np.array([result_b["w_orig"][str(a)] for a in arcs])

    x = np.arange(len(arcs))
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.2 * len(arcs) + 2, 4))
    ax.bar(x - width / 2, flows_a, width, label=result_a.get("command", "before"))
    ax.bar(x + width / 2, flows_b, width, label=result_b.get("command", "after"))
    ax.set_xticks(x, [str(a) for a in arcs])
    ax.set_ylabel("flow")
    ax.set_xlabel("original arc")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
