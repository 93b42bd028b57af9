"""Original network ingestion and its condensed acyclic (CoDAG) expansion.

The original directed graph may contain bidirectional arc pairs, so
sequential arc selection could cycle.  The condensed DAG keeps every
acyclic origin->destination route of the original network while making
cycles structurally impossible.  Each CoDAG arc remembers which original
arc it is a copy of; flows on copies of the same original arc share that
arc's latency.
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Union

import numpy as np

from .errors import (
    DimensionMismatch,
    NegativeFlow,
    NoRoute,
    ParseError,
    RouteExplosion,
    ValidationError,
)

DEFAULT_ROUTE_CAP = 10**6

NodeId = Union[str, int]
ArcId = Union[str, int]


@dataclass(frozen=True)
class AffineLatency:
    """Affine latency s(w) = theta1*w + theta0 with theta1 > 0."""

    theta1: float
    theta0: float = 0.0

    def __post_init__(self):
        if not self.theta1 > 0:
            raise ValidationError(f"theta1 must be positive, got {self.theta1}")
        if self.theta0 < 0:
            raise ValidationError(f"theta0 must be nonnegative, got {self.theta0}")

    def __call__(self, w):
        return self.theta1 * np.asarray(w, dtype=float) + self.theta0

    def deriv(self, w):
        return np.full_like(np.asarray(w, dtype=float), self.theta1)

    @property
    def is_affine(self) -> bool:
        return True


@dataclass(frozen=True)
class GeneralLatency:
    """Strictly increasing, continuously differentiable latency callable.

    Monotonicity is spot-checked on a grid over [0, grid_max] at
    construction; the callable itself is trusted beyond that.
    """

    fn: Callable[[float], float]
    deriv_fn: Callable[[float], float]
    grid_max: float = 1.0

    def __post_init__(self):
        grid = np.linspace(0.0, self.grid_max, 17)
        vals = np.array([float(self.fn(x)) for x in grid])
        if np.any(np.diff(vals) <= 0):
            raise ValidationError("general latency is not strictly increasing on the check grid")
        if np.any(vals < 0):
            raise ValidationError("general latency takes negative values on the check grid")

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        return np.vectorize(self.fn, otypes=[float])(w) if w.ndim else float(self.fn(float(w)))

    def deriv(self, w):
        w = np.asarray(w, dtype=float)
        return np.vectorize(self.deriv_fn, otypes=[float])(w) if w.ndim else float(self.deriv_fn(float(w)))

    @property
    def is_affine(self) -> bool:
        return False


LatencyFn = Union[AffineLatency, GeneralLatency]


@dataclass(frozen=True)
class OriginalNetwork:
    """Single origin-destination network with per-arc latency functions.

    Arcs are (id, tail, head) triples; parallel arcs and bidirectional
    pairs are allowed, self-loops are not.
    """

    nodes: tuple[NodeId, ...]
    arcs: tuple[tuple[ArcId, NodeId, NodeId], ...]
    origin: NodeId
    destination: NodeId
    demand: float
    latency: Mapping[ArcId, LatencyFn]

    def __post_init__(self):
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise ValidationError("duplicate node ids")
        if self.origin == self.destination:
            raise ValidationError("origin and destination must differ")
        for endpoint in (self.origin, self.destination):
            if endpoint not in node_set:
                raise ValidationError(f"endpoint {endpoint!r} not among nodes")
        if not self.demand > 0:
            raise ValidationError(f"demand must be positive, got {self.demand}")
        seen_arc_ids = set()
        for arc_id, tail, head in self.arcs:
            if arc_id in seen_arc_ids:
                raise ValidationError(f"duplicate arc id {arc_id!r}")
            seen_arc_ids.add(arc_id)
            if tail not in node_set or head not in node_set:
                raise ValidationError(f"arc {arc_id!r} references unknown node")
            if tail == head:
                raise ValidationError(f"arc {arc_id!r} is a self-loop")
            if arc_id not in self.latency:
                raise ValidationError(f"arc {arc_id!r} has no latency function")
        if not self._destination_reachable():
            raise NoRoute(f"no path from {self.origin!r} to {self.destination!r}")

    def _destination_reachable(self) -> bool:
        adjacency: dict[NodeId, list[NodeId]] = {}
        for _, tail, head in self.arcs:
            adjacency.setdefault(tail, []).append(head)
        frontier = [self.origin]
        seen = {self.origin}
        while frontier:
            node = frontier.pop()
            if node == self.destination:
                return True
            for nxt in adjacency.get(node, ()):
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        return False

    @functools.cached_property
    def arc_ids(self) -> tuple[ArcId, ...]:
        return tuple(a[0] for a in self.arcs)

    def out_arcs(self, node: NodeId) -> list[tuple[ArcId, NodeId]]:
        return [(arc_id, head) for arc_id, tail, head in self.arcs if tail == node]

    def latency_of(self, arc_id: ArcId) -> LatencyFn:
        return self.latency[arc_id]

    @functools.cached_property
    def all_affine(self) -> bool:
        return all(fn.is_affine for fn in self.latency.values())


def enumerate_acyclic_routes(
    net: OriginalNetwork, cap: int = DEFAULT_ROUTE_CAP
) -> list[tuple[ArcId, ...]]:
    """All simple origin->destination routes, each as a tuple of arc ids.

    Routes repeat no node.  Raises RouteExplosion once more than ``cap``
    routes have been found.
    """
    out: dict[NodeId, list[tuple[ArcId, NodeId]]] = {}
    for arc_id, tail, head in net.arcs:
        out.setdefault(tail, []).append((arc_id, head))

    routes: list[tuple[ArcId, ...]] = []
    prefix: list[ArcId] = []
    visited = {net.origin}

    def walk(node: NodeId) -> None:
        if node == net.destination:
            if len(routes) >= cap:
                raise RouteExplosion(cap)
            routes.append(tuple(prefix))
            return
        for arc_id, head in out.get(node, ()):
            if head in visited:
                continue
            visited.add(head)
            prefix.append(arc_id)
            walk(head)
            prefix.pop()
            visited.remove(head)

    walk(net.origin)
    return routes


@dataclass
class CoDag:
    """Condensed DAG expansion of an original network.

    Nodes and arcs are stored in topological order with the destination
    last; arcs are sorted by tail position, so each node's outgoing
    arcs form a contiguous segment (see ``out_starts``).  Index arrays
    drive the numerical code, id tuples drive serialization.  Instances
    are immutable after construction.
    """

    net: OriginalNetwork
    node_ids: tuple[str, ...]
    arc_ids: tuple[str, ...]
    arc_tail: np.ndarray  # node index per arc
    arc_head: np.ndarray  # node index per arc
    arc_orig: np.ndarray  # original-arc index per arc
    origin_idx: int
    destination_idx: int
    out_arcs: tuple[tuple[int, ...], ...]  # arc indices per node
    in_arcs: tuple[tuple[int, ...], ...]
    arc_heights: np.ndarray  # m_a per arc
    max_route_len: int  # l(G): most arcs on any route
    node_provenance: tuple[NodeId, ...] = field(repr=False, default=())
    # segment view: out_starts[k] is the first arc of the k-th
    # non-destination node; the destination owns no arcs and sits last
    out_starts: np.ndarray = field(repr=False, default=None)
    out_counts: np.ndarray = field(repr=False, default=None)
    _theta_cache: tuple[np.ndarray, np.ndarray] | None = field(
        repr=False, default=None, compare=False
    )

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_arcs(self) -> int:
        return len(self.arc_ids)

    @property
    def n_orig(self) -> int:
        return len(self.net.arcs)

    @property
    def origin(self) -> str:
        return self.node_ids[self.origin_idx]

    @property
    def destination(self) -> str:
        return self.node_ids[self.destination_idx]

    @property
    def nodes(self) -> tuple[str, ...]:
        return self.node_ids

    @property
    def arcs(self) -> tuple[tuple[str, str, str], ...]:
        return tuple(
            (aid, self.node_ids[self.arc_tail[k]], self.node_ids[self.arc_head[k]])
            for k, aid in enumerate(self.arc_ids)
        )

    @property
    def arc_map(self) -> dict[str, ArcId]:
        orig_ids = self.net.arc_ids
        return {aid: orig_ids[self.arc_orig[k]] for k, aid in enumerate(self.arc_ids)}

    @property
    def height_max(self) -> int:
        return int(self.arc_heights.max())

    @property
    def demand(self) -> float:
        return self.net.demand

    def theta_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(theta1, theta0) per original arc; requires all-affine latencies."""
        from .errors import NonAffineLatency

        if self._theta_cache is not None:
            return self._theta_cache
        if not self.net.all_affine:
            raise NonAffineLatency("network has non-affine latency functions")
        theta1 = np.empty(self.n_orig)
        theta0 = np.empty(self.n_orig)
        for j, arc_id in enumerate(self.net.arc_ids):
            fn = self.net.latency[arc_id]
            theta1[j] = fn.theta1
            theta0[j] = fn.theta0
        self._theta_cache = (theta1, theta0)
        return self._theta_cache

    def latency_values(self, w_orig: np.ndarray) -> np.ndarray:
        """s_[a](w_[a]) per original arc, vectorized for affine networks."""
        if self.net.all_affine:
            theta1, theta0 = self.theta_arrays()
            return theta1 * w_orig + theta0
        return np.array(
            [float(self.net.latency[a](w_orig[j])) for j, a in enumerate(self.net.arc_ids)]
        )

    def marginal_latency_values(self, w_orig: np.ndarray) -> np.ndarray:
        """ds/dw per original arc at the given aggregated flows."""
        if self.net.all_affine:
            return self.theta_arrays()[0]
        return np.array(
            [float(self.net.latency[a].deriv(w_orig[j])) for j, a in enumerate(self.net.arc_ids)]
        )

    def segment_sums(self, values: np.ndarray) -> np.ndarray:
        """Per-node sums of a per-arc array (non-destination nodes, in order)."""
        return np.add.reduceat(values, self.out_starts)

    def per_arc(self, node_values: np.ndarray) -> np.ndarray:
        """Broadcast per-(non-destination)-node values onto their arcs."""
        return np.repeat(node_values, self.out_counts)

    def aggregate_unchecked(self, w: np.ndarray) -> np.ndarray:
        """Original-arc totals without validation (hot-path use)."""
        return np.bincount(self.arc_orig, weights=w, minlength=self.n_orig)


def aggregate_flow(codag: CoDag, w: np.ndarray) -> np.ndarray:
    """Sum CoDAG-arc flows onto their original arcs."""
    w = np.asarray(w, dtype=float)
    if w.shape != (codag.n_arcs,):
        raise DimensionMismatch(
            f"expected {codag.n_arcs} CoDAG-arc flows, got shape {w.shape}"
        )
    if (w < 0).any():
        raise NegativeFlow("CoDAG flows must be nonnegative")
    return codag.aggregate_unchecked(w)


def propagate_flows_raw(codag: CoDag, xi: np.ndarray, demand: float) -> np.ndarray:
    """Forward pass: node inflows split by arc-selection fractions.

    Nodes are stored topologically, so a single sweep suffices.  The
    result satisfies flow conservation up to rounding whenever each
    node's outgoing xi sums to one.
    """
    xi = np.asarray(xi, dtype=float)
    w = np.empty(codag.n_arcs)
    inflow = np.zeros(codag.n_nodes)
    inflow[codag.origin_idx] = demand
    starts = codag.out_starts
    n_seg = len(starts)
    heads = codag.arc_head
    for k in range(n_seg):
        s = starts[k]
        e = starts[k + 1] if k + 1 < n_seg else codag.n_arcs
        seg = inflow[k] * xi[s:e]
        w[s:e] = seg
        np.add.at(inflow, heads[s:e], seg)
    return w


def conservation_residual(codag: CoDag, w: np.ndarray) -> float:
    """Max-norm violation of flow conservation and origin outflow."""
    w = np.asarray(w, dtype=float)
    out_sums = codag.segment_sums(w)  # non-destination nodes, origin first
    in_sums = np.zeros(codag.n_nodes)
    np.add.at(in_sums, codag.arc_head, w)
    worst = abs(float(out_sums[0]) - codag.demand)
    if codag.n_nodes > 2:
        inter = np.abs(out_sums[1:] - in_sums[1 : codag.n_nodes - 1])
        if inter.size:
            worst = max(worst, float(inter.max()))
    return worst


def _class_hash(payload: str) -> str:
    return hashlib.blake2b(payload.encode(), digest_size=4).hexdigest()


def build_codag(net: OriginalNetwork, cap: int = DEFAULT_ROUTE_CAP) -> CoDag:
    """Expand ``net`` into its condensed DAG.

    Construction: enumerate all acyclic routes, build their prefix tree,
    then merge prefix-tree nodes with identical suffix-route sets
    (bottom-up minimization of the acyclic automaton).  The resulting
    DAG spells exactly the acyclic route set, once each.
    """
    routes = enumerate_acyclic_routes(net, cap=cap)
    if not routes:
        raise NoRoute(f"no path from {net.origin!r} to {net.destination!r}")

    orig_index = {arc_id: k for k, (arc_id, _, _) in enumerate(net.arcs)}
    arc_head_node = {arc_id: head for arc_id, _, head in net.arcs}

    # Prefix tree.  children: orig arc index -> child trie node id.
    children: list[dict[int, int]] = [{}]
    trie_node_of: list[NodeId] = [net.origin]  # original node each prefix ends at
    for route in routes:
        cur = 0
        for arc_id in route:
            j = orig_index[arc_id]
            nxt = children[cur].get(j)
            if nxt is None:
                children.append({})
                trie_node_of.append(arc_head_node[arc_id])
                nxt = len(children) - 1
                children[cur][j] = nxt
            cur = nxt

    # Bottom-up merge: identical (terminal, outgoing signature) pairs
    # collapse into one class.  Terminal nodes are exactly the leaves,
    # because no acyclic route extends past the destination.
    class_of = [-1] * len(children)
    class_sig: dict[tuple, int] = {}
    class_edges: list[tuple[tuple[int, int], ...]] = []  # (orig idx, child class)
    class_node: list[NodeId] = []
    class_hashes: list[str] = []

    depth = _subtree_depths(children)
    order = sorted(range(len(children)), key=lambda t: depth[t])  # children first

    def _resolve(trie_id: int) -> int:
        kids = children[trie_id]
        if not kids:
            sig: tuple = ("accept",)
            payload = "accept"
        else:
            pairs = tuple(sorted((j, class_of[child]) for j, child in kids.items()))
            sig = pairs
            payload = ";".join(f"{j}->{class_hashes[c]}" for j, c in pairs)
        existing = class_sig.get(sig)
        if existing is not None:
            return existing
        cls = len(class_edges)
        class_sig[sig] = cls
        class_edges.append(() if not kids else tuple(sorted((j, class_of[child]) for j, child in kids.items())))
        class_node.append(trie_node_of[trie_id])
        class_hashes.append(_class_hash(payload))
        return cls

    for trie_id in order:
        class_of[trie_id] = _resolve(trie_id)

    root_class = class_of[0]

    # Topological node order: depth-first from the root, children in
    # original-arc input order, destination forced last.
    topo: list[int] = []
    seen: set[int] = set()

    def _visit(cls: int) -> None:
        if cls in seen:
            return
        seen.add(cls)
        for j, child in sorted(class_edges[cls]):
            _visit(child)
        topo.append(cls)

    _visit(root_class)
    topo.reverse()
    # reverse-postorder of a DAG is a topological order
    node_order = {cls: k for k, cls in enumerate(topo)}

    orig_ids = net.arc_ids
    copies_per_orig = np.zeros(len(orig_ids), dtype=int)
    arc_records: list[tuple[int, int, int]] = []  # (tail class pos, head class pos, orig idx)
    for pos, cls in enumerate(topo):
        for j, child in sorted(class_edges[cls]):
            arc_records.append((pos, node_order[child], j))
            copies_per_orig[j] += 1

    arc_tail = np.array([r[0] for r in arc_records], dtype=int)
    arc_head = np.array([r[1] for r in arc_records], dtype=int)
    arc_orig = np.array([r[2] for r in arc_records], dtype=int)

    arc_ids = []
    copy_counter = np.zeros(len(orig_ids), dtype=int)
    for j in arc_orig:
        if copies_per_orig[j] == 1:
            arc_ids.append(str(orig_ids[j]))
        else:
            arc_ids.append(f"{orig_ids[j]}.{copy_counter[j]}")
            copy_counter[j] += 1

    node_ids = tuple(
        f"{class_node[cls]}|{class_hashes[cls]}" for cls in topo
    )
    node_provenance = tuple(class_node[cls] for cls in topo)

    n_nodes = len(topo)
    out_lists: list[list[int]] = [[] for _ in range(n_nodes)]
    in_lists: list[list[int]] = [[] for _ in range(n_nodes)]
    for k in range(len(arc_records)):
        out_lists[arc_tail[k]].append(k)
        in_lists[arc_head[k]].append(k)

    destination_pos = node_order[class_sig[("accept",)]]
    # the accept class is reachable from every class, so reverse
    # postorder always places it last
    assert destination_pos == len(topo) - 1

    # Heights: m_a = 1 on arcs into the destination, else one more than
    # the tallest downstream arc.  Arcs are stored sorted by tail
    # position, so the backward sweep sees downstream arcs first.
    heights = np.zeros(len(arc_records), dtype=int)
    for k in range(len(arc_records) - 1, -1, -1):
        head = arc_head[k]
        if head == destination_pos:
            heights[k] = 1
        else:
            heights[k] = 1 + max(heights[a] for a in out_lists[head])

    max_route_len = max(len(r) for r in routes)

    # first arc index of each non-destination node (destination is the
    # last topological position and owns no arcs)
    out_starts = np.searchsorted(arc_tail, np.arange(n_nodes - 1), side="left")
    out_counts = np.diff(np.append(out_starts, len(arc_records)))

    codag = CoDag(
        net=net,
        node_ids=node_ids,
        arc_ids=tuple(arc_ids),
        arc_tail=arc_tail,
        arc_head=arc_head,
        arc_orig=arc_orig,
        origin_idx=0,
        destination_idx=destination_pos,
        out_arcs=tuple(tuple(l) for l in out_lists),
        in_arcs=tuple(tuple(l) for l in in_lists),
        arc_heights=heights,
        max_route_len=max_route_len,
        node_provenance=node_provenance,
        out_starts=out_starts,
        out_counts=out_counts,
    )
    return codag


def _subtree_depths(children: list[dict[int, int]]) -> list[int]:
    # Longest chain below each trie node; orders the bottom-up merge.
    depth = [0] * len(children)
    for node in range(len(children) - 1, -1, -1):
        # trie nodes are created parent-before-child, so a backward
        # sweep resolves children first
        kids = children[node]
        if kids:
            depth[node] = 1 + max(depth[c] for c in kids.values())
    return depth


def enumerate_codag_routes(
    codag: CoDag, cap: int = DEFAULT_ROUTE_CAP
) -> list[tuple[ArcId, ...]]:
    """Origin->destination paths of the CoDAG as original-arc-id tuples."""
    orig_ids = codag.net.arc_ids
    routes: list[tuple[ArcId, ...]] = []
    prefix: list[ArcId] = []

    def walk(node: int) -> None:
        if node == codag.destination_idx:
            if len(routes) >= cap:
                raise RouteExplosion(cap)
            routes.append(tuple(prefix))
            return
        for a in codag.out_arcs[node]:
            prefix.append(orig_ids[codag.arc_orig[a]])
            walk(codag.arc_head[a])
            prefix.pop()

    walk(codag.origin_idx)
    return routes


# --- JSON wire format ------------------------------------------------------
#
# {"nodes": [...],
#  "arcs": [{"id":..., "tail":..., "head":..., "theta1":..., "theta0":...}, ...],
#  "origin":..., "destination":..., "demand":...}
#
# A "latency" key on an arc is reserved for non-affine extensions and
# currently rejected.

_REQUIRED_TOP = ("nodes", "arcs", "origin", "destination", "demand")
_REQUIRED_ARC = ("id", "tail", "head", "theta1", "theta0")


def network_from_json(doc: dict) -> OriginalNetwork:
    """Build and validate a network from its normative JSON document."""
    if not isinstance(doc, dict):
        raise ParseError("network document must be a JSON object")
    for key in _REQUIRED_TOP:
        if key not in doc:
            raise ParseError(f"missing required field {key!r}", field=key)
    if not isinstance(doc["arcs"], list):
        raise ParseError("field 'arcs' must be a list", field="arcs")
    arcs = []
    latency: dict[ArcId, LatencyFn] = {}
    for pos, arc in enumerate(doc["arcs"]):
        if not isinstance(arc, dict):
            raise ParseError(f"arc #{pos} must be an object", field="arcs")
        if "latency" in arc:
            raise ParseError(
                f"arc #{pos}: 'latency' is reserved for extension and not yet supported",
                field="latency",
            )
        for key in _REQUIRED_ARC:
            if key not in arc:
                raise ParseError(f"arc #{pos} missing field {key!r}", field=key)
        try:
            fn = AffineLatency(theta1=float(arc["theta1"]), theta0=float(arc["theta0"]))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"arc #{pos}: bad theta values ({exc})", field="theta1") from exc
        arcs.append((arc["id"], arc["tail"], arc["head"]))
        latency[arc["id"]] = fn
    try:
        demand = float(doc["demand"])
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad demand value ({exc})", field="demand") from exc
    return OriginalNetwork(
        nodes=tuple(doc["nodes"]),
        arcs=tuple(arcs),
        origin=doc["origin"],
        destination=doc["destination"],
        demand=demand,
        latency=latency,
    )


def network_to_json(net: OriginalNetwork) -> dict:
    """Inverse of network_from_json for affine networks."""
    arcs = []
    for arc_id, tail, head in net.arcs:
        fn = net.latency[arc_id]
        if not fn.is_affine:
            raise ParseError(
                f"arc {arc_id!r}: general latencies have no file representation yet",
                field="latency",
            )
        arcs.append(
            {"id": arc_id, "tail": tail, "head": head,
             "theta1": fn.theta1, "theta0": fn.theta0}
        )
    return {
        "nodes": list(net.nodes),
        "arcs": arcs,
        "origin": net.origin,
        "destination": net.destination,
        "demand": net.demand,
    }


def load_network_file(path) -> OriginalNetwork:
    """Parse a network JSON file, reporting position for syntax errors."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return network_from_json(doc)
