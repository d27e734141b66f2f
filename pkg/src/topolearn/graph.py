"""DAG topologies for a single stage: construction, generators, metrics, editing.

Node indices double as topological order. Node 0 is the input node and node
``n_nodes - 1`` the output node; an edge ``(j, i)`` always has ``j < i``.
"""
from __future__ import annotations

import math
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from .prng import Rng

Edge = tuple[int, int]


class GraphError(ValueError):
    pass


def _edge_order(e: Edge) -> tuple[int, int]:
    return (e[1], e[0])


@dataclass(frozen=True)
class Graph:
    n_nodes: int
    edges: tuple[Edge, ...]

    def __post_init__(self) -> None:
        if self.n_nodes < 2:
            raise GraphError(f"graph needs at least 2 nodes, got {self.n_nodes}")
        for j, i in self.edges:
            if not (0 <= j < self.n_nodes and 0 <= i < self.n_nodes):
                raise GraphError(f"edge ({j}, {i}) out of range for {self.n_nodes} nodes")
            if j >= i:
                raise GraphError(f"edge ({j}, {i}) violates topological order")
        if len(set(self.edges)) != len(self.edges):
            raise GraphError("duplicate edges")
        if list(self.edges) != sorted(self.edges, key=_edge_order):
            raise GraphError("edges must be sorted by (i, j); use build_graph")

    @property
    def output(self) -> int:
        return self.n_nodes - 1

    @property
    def edge_set(self) -> frozenset[Edge]:
        return frozenset(self.edges)

    def predecessors(self) -> list[list[int]]:
        """Reverse adjacency: ``preds[i]`` lists source nodes of edges into ``i``, ascending."""
        preds: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for j, i in self.edges:
            preds[i].append(j)
        return preds

    def in_degrees(self) -> list[int]:
        deg = [0] * self.n_nodes
        for _, i in self.edges:
            deg[i] += 1
        return deg

    def out_degrees(self) -> list[int]:
        deg = [0] * self.n_nodes
        for j, _ in self.edges:
            deg[j] += 1
        return deg

    def mask(self) -> np.ndarray:
        """Boolean adjacency with ``mask[i, j]`` true for edge ``j -> i``."""
        m = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        for j, i in self.edges:
            m[i, j] = True
        return m


def build_graph(n_nodes: int, edge_list: Iterable[Edge]) -> Graph:
    """Validate and deduplicate an edge list into a :class:`Graph`."""
    if n_nodes < 2:
        raise GraphError(f"graph needs at least 2 nodes, got {n_nodes}")
    seen: set[Edge] = set()
    for e in edge_list:
        j, i = int(e[0]), int(e[1])
        if not (0 <= j < n_nodes and 0 <= i < n_nodes):
            raise GraphError(f"edge ({j}, {i}) out of range for {n_nodes} nodes")
        if j >= i:
            raise GraphError(f"edge ({j}, {i}) violates topological order")
        seen.add((j, i))
    return Graph(n_nodes, tuple(sorted(seen, key=_edge_order)))


@dataclass(frozen=True, eq=False)
class AlphaMatrix:
    """Edge weights stored row-per-destination: ``values[i, j]`` is the weight of ``j -> i``."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float32, copy=True)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise GraphError("alpha matrix must be square")
        if np.any(np.triu(v) != 0):
            raise GraphError("alpha matrix must be strictly lower-triangular")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AlphaMatrix):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(
            np.array_equal(self.values.view(np.uint32), other.values.view(np.uint32))
        )

    def __hash__(self) -> int:
        return hash(self.values.tobytes())

    def conforms_to(self, g: Graph) -> bool:
        if self.n_nodes != g.n_nodes:
            return False
        return not np.any(self.values[~g.mask()] != 0)

    def edge_values(self, g: Graph) -> np.ndarray:
        """Weights of ``g``'s edges in the graph's edge order."""
        if not g.edges:
            return np.zeros(0, dtype=np.float32)
        idx = np.asarray(g.edges)
        return self.values[idx[:, 1], idx[:, 0]].copy()

    @classmethod
    def ones(cls, g: Graph) -> AlphaMatrix:
        return cls(g.mask().astype(np.float32))

    @classmethod
    def from_edges(cls, g: Graph, weights: Iterable[float]) -> AlphaMatrix:
        v = np.zeros((g.n_nodes, g.n_nodes), dtype=np.float32)
        weights = list(weights)
        if len(weights) != len(g.edges):
            raise GraphError("one weight per edge required")
        for (j, i), w in zip(g.edges, weights):
            v[i, j] = w
        return cls(v)


# -- generators ---------------------------------------------------------------


def complete_graph(n: int) -> Graph:
    if n < 2:
        raise GraphError(f"complete graph needs n >= 2, got {n}")
    return build_graph(n, ((j, i) for i in range(n) for j in range(i)))


def residual_graph(n: int, interval: int) -> Graph:
    """Residual stack unrolled: blocks of ``interval`` chained nodes with identity shortcuts.

    Each block's first node sees the input node plus the last node of every
    earlier block; the output node sees the input plus every block's last node.
    ``interval=1`` gives the complete graph.
    """
    if n < 3:
        raise GraphError(f"residual graph needs n >= 3, got {n}")
    if interval < 1:
        raise GraphError(f"interval must be >= 1, got {interval}")
    if (n - 2) % interval:
        raise GraphError(f"interval must divide n-2 (n={n}, interval={interval})")
    edges: list[Edge] = []
    block_lasts: list[int] = []
    for start in range(1, n - 1, interval):
        edges.append((0, start))
        edges.extend((last, start) for last in block_lasts)
        edges.extend((m, m + 1) for m in range(start, start + interval - 1))
        block_lasts.append(start + interval - 1)
    edges.append((0, n - 1))
    edges.extend((last, n - 1) for last in block_lasts)
    return build_graph(n, edges)


def residual_edge_formula(n: int, interval: int) -> int:
    """Edge count quoted for residual stages: B + C(B + 2, 2) with B = (n - 2) / interval."""
    blocks = (n - 2) // interval
    return blocks + math.comb(blocks + 2, 2)


def _repair(n: int, internal_edges: Iterable[Edge]) -> Graph:
    """Attach orphaned internal nodes to the input (no predecessor) and output (no successor)."""
    edges = set(internal_edges)
    has_pred = {i for _, i in edges}
    has_succ = {j for j, _ in edges}
    for v in range(1, n - 1):
        if v not in has_pred:
            edges.add((0, v))
        if v not in has_succ:
            edges.add((v, n - 1))
    return build_graph(n, edges)


def random_graph(n: int, p: float, seed: int) -> Graph:
    """Independent edges with probability ``p`` among internal nodes, then repair."""
    if not 0.0 <= p <= 1.0:
        raise GraphError(f"p must lie in [0, 1], got {p}")
    if n < 2:
        raise GraphError(f"graph needs at least 2 nodes, got {n}")
    if n == 2:
        return build_graph(2, [(0, 1)])
    rng = Rng.derive(seed, "random_graph")
    edges = [
        (j, i)
        for i in range(1, n - 1)
        for j in range(1, i)
        if rng.random() < p
    ]
    return _repair(n, edges)


def _er_undirected(n: int, p: float, rng: Rng) -> list[Edge]:
    return [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]


def _ba_undirected(n: int, m: int, rng: Rng) -> list[Edge]:
    # Start from m isolated nodes; each new node attaches to m distinct targets
    # chosen proportionally to degree (the first new node links to all seeds).
    edges: list[Edge] = []
    repeated: list[int] = []
    targets = list(range(m))
    for source in range(m, n):
        for t in targets:
            edges.append((t, source))
        repeated.extend(targets)
        repeated.extend([source] * m)
        chosen: list[int] = []
        picked: set[int] = set()
        while len(chosen) < m:
            x = rng.choice(repeated)
            if x not in picked:
                picked.add(x)
                chosen.append(x)
        targets = chosen
    return edges


def _ws_undirected(n: int, k: int, p: float, rng: Rng) -> list[Edge]:
    adj: dict[int, set[int]] = {v: set() for v in range(n)}
    for v in range(n):
        for step in range(1, k // 2 + 1):
            u = (v + step) % n
            adj[v].add(u)
            adj[u].add(v)
    # rewire each lattice edge (v, v+step) with probability p
    for step in range(1, k // 2 + 1):
        for v in range(n):
            u = (v + step) % n
            if rng.random() < p:
                candidates = [w for w in range(n) if w != v and w not in adj[v]]
                if not candidates:
                    continue
                w = rng.choice(candidates)
                adj[v].discard(u)
                adj[u].discard(v)
                adj[v].add(w)
                adj[w].add(v)
    return sorted({(min(a, b), max(a, b)) for a in adj for b in adj[a]})


def classic_undirected(kind: str, n_internal: int, seed: int, **params: float) -> list[Edge]:
    """Undirected edge list of an ER, BA or WS graph on ``n_internal`` nodes."""
    rng = Rng.derive(seed, "classic", kind)
    kind = kind.lower()
    if n_internal < 1:
        raise GraphError("need at least one internal node")
    if kind == "er":
        p = float(params["p"])
        if not 0.0 <= p <= 1.0:
            raise GraphError(f"ER p must lie in [0, 1], got {p}")
        return _er_undirected(n_internal, p, rng)
    if kind == "ba":
        m = int(params["m"])
        if not 1 <= m < n_internal:
            raise GraphError(f"BA requires 1 <= m < n_internal, got m={m}, n_internal={n_internal}")
        return _ba_undirected(n_internal, m, rng)
    if kind == "ws":
        k = int(params["k"])
        p = float(params["p"])
        if k % 2 or k < 0 or k >= n_internal:
            raise GraphError(f"WS requires even k < n_internal, got k={k}, n_internal={n_internal}")
        if not 0.0 <= p <= 1.0:
            raise GraphError(f"WS p must lie in [0, 1], got {p}")
        return _ws_undirected(n_internal, k, p, rng)
    raise GraphError(f"unknown graph family {kind!r}")


def classic_random_graph(kind: str, n_internal: int, seed: int, **params: float) -> Graph:
    """ER/BA/WS graph oriented by a random node order, wrapped with input/output nodes."""
    undirected = classic_undirected(kind, n_internal, seed, **params)
    order = Rng.derive(seed, "classic-order", kind).permutation(n_internal)
    rank = {int(v): r + 1 for r, v in enumerate(order)}  # internal nodes occupy 1..n_internal
    oriented = []
    for u, v in undirected:
        a, b = rank[u], rank[v]
        oriented.append((min(a, b), max(a, b)))
    return _repair(n_internal + 2, oriented)


def make_topology(spec: dict, n: int, seed: int) -> Graph:
    """Dispatch on a topology spec such as ``{"type": "residual", "interval": 2}``."""
    kind = spec.get("type")
    if kind == "complete":
        return complete_graph(n)
    if kind == "residual":
        return residual_graph(n, int(spec["interval"]))
    if kind == "random":
        return random_graph(n, float(spec["p"]), seed)
    if kind in ("er", "ba", "ws"):
        params = {k: v for k, v in spec.items() if k != "type"}
        return classic_random_graph(kind, n - 2, seed, **params)
    raise GraphError(f"unknown topology type {kind!r}")


# -- measurement -------------------------------------------------------------


@dataclass(frozen=True)
class TopologyMetrics:
    in_degrees: tuple[int, ...]
    out_degrees: tuple[int, ...]
    edge_count: int
    input_output_path_count: int


def count_paths(g: Graph) -> int:
    """Number of distinct directed paths from node 0 to the output node (exact)."""
    paths = [0] * g.n_nodes
    paths[0] = 1
    preds = g.predecessors()
    for i in range(1, g.n_nodes):
        paths[i] = sum(paths[j] for j in preds[i])
    return paths[-1]


def topology_metrics(g: Graph) -> TopologyMetrics:
    return TopologyMetrics(
        in_degrees=tuple(g.in_degrees()),
        out_degrees=tuple(g.out_degrees()),
        edge_count=len(g.edges),
        input_output_path_count=count_paths(g),
    )


def search_space_log2(stage_sizes: Iterable[int]) -> int:
    """log2 of the number of discrete sub-topologies of complete stages."""
    total = 0
    for n in stage_sizes:
        if n < 2:
            raise GraphError(f"stage size must be >= 2, got {n}")
        total += n * (n - 1) // 2
    return total


# -- editing -----------------------------------------------------------------


def prune_edges(g: Graph, a: AlphaMatrix, threshold: float) -> tuple[Graph, AlphaMatrix]:
    """Keep edges with ``|alpha| >= threshold``; dropped entries become exactly 0."""
    if threshold < 0:
        raise GraphError(f"threshold must be nonnegative, got {threshold}")
    if not a.conforms_to(g):
        raise GraphError("alpha matrix does not conform to graph")
    kept = [(j, i) for j, i in g.edges if abs(float(a.values[i, j])) >= threshold]
    pruned = build_graph(g.n_nodes, kept)
    values = np.where(pruned.mask(), a.values, np.float32(0))
    return pruned, AlphaMatrix(values)


def _reindex(g: Graph, removed: set[int]) -> Graph:
    keep = [v for v in range(g.n_nodes) if v not in removed]
    new_index = {v: k for k, v in enumerate(keep)}
    edges = [
        (new_index[j], new_index[i])
        for j, i in g.edges
        if j not in removed and i not in removed
    ]
    return build_graph(len(keep), edges)


def remove_node(g: Graph, idx: int) -> Graph:
    if not 0 < idx < g.n_nodes - 1:
        raise GraphError(f"only internal nodes can be removed, got index {idx}")
    return _reindex(g, {idx})


def eliminate_dead_nodes(g: Graph) -> tuple[Graph, tuple[int, ...]]:
    """Drop internal nodes with zero in- or out-degree until none remain.

    Returns the compacted graph and the removed indices in the original numbering.
    """
    removed: set[int] = set()
    while True:
        indeg = [0] * g.n_nodes
        outdeg = [0] * g.n_nodes
        for j, i in g.edges:
            if j in removed or i in removed:
                continue
            indeg[i] += 1
            outdeg[j] += 1
        dead = {
            v
            for v in range(1, g.n_nodes - 1)
            if v not in removed and (indeg[v] == 0 or outdeg[v] == 0)
        }
        if not dead:
            break
        removed |= dead
    return _reindex(g, removed), tuple(sorted(removed))


# -- text form ----------------------------------------------------------------


def dumps_graph(g: Graph, alpha: AlphaMatrix | None = None) -> str:
    """Text form: ``n=<int>`` then ``j i alpha`` per edge in (i, j) order.

    Without an alpha matrix every edge is written with weight 1.
    """
    lines = [f"n={g.n_nodes}"]
    for j, i in g.edges:
        w = 1.0 if alpha is None else float(alpha.values[i, j])
        lines.append(f"{j} {i} {w!r}")
    return "\n".join(lines) + "\n"


def loads_graph(text: str) -> tuple[Graph, AlphaMatrix]:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("n="):
        raise GraphError("graph text must start with 'n=<int>'")
    n = int(lines[0][2:])
    edges: list[Edge] = []
    weights: list[float] = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 3:
            raise GraphError(f"malformed edge line {ln!r}")
        edges.append((int(parts[0]), int(parts[1])))
        weights.append(float(parts[2]))
    g = build_graph(n, edges)
    if len(g.edges) != len(edges):
        raise GraphError("duplicate edge in graph text")
    order = {e: w for e, w in zip(edges, weights)}
    return g, AlphaMatrix.from_edges(g, (order[e] for e in g.edges))
