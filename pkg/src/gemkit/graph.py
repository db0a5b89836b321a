"""Weighted city graphs: hex tessellations, geodesic costs, neighborhoods.

A city is modeled as a directed graph whose vertices are hexagonal cells.
Each directed edge carries a nonnegative weight (the travel distance from
cell to cell); the transport cost between any two vertices is the geodesic
(cheapest directed path) cost, with unreachable pairs kept at ``inf``.
Every vertex also has a neighborhood: itself plus everything reachable
within ``neighborhood_order`` hops, which is where transport is allowed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import csgraph_from_dense, dijkstra

log = logging.getLogger(__name__)

# Axial-coordinate offsets of the six hex neighbors.
HEX_DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1))


@dataclass(frozen=True)
class HexGridSpec:
    """Parallelogram patch of hexagons in axial coordinates.

    ``blocked`` lists directed vertex-id pairs (i, j) that are adjacent on
    the hex lattice but cannot be reached directly by traffic; their edge
    weight is forced to infinity (the pair may still be connected through
    other cells).
    """

    rows: int
    cols: int
    side_length_m: float = 1400.0
    adjacent_distance_m: float = 2400.0
    blocked: frozenset[tuple[int, int]] = frozenset()

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("empty grid: rows and cols must be >= 1")
        if self.side_length_m <= 0:
            raise ValueError("side_length_m must be positive")
        if self.adjacent_distance_m <= 0:
            raise ValueError("adjacent_distance_m must be positive")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def vertex_id(self, q: int, r: int) -> int:
        """Canonical row-major numbering over axial coordinates."""
        if not (0 <= q < self.cols and 0 <= r < self.rows):
            raise ValueError(f"axial coordinate ({q}, {r}) outside grid")
        return r * self.cols + q

    def axial(self, vertex: int) -> tuple[int, int]:
        if not (0 <= vertex < self.n):
            raise ValueError(f"vertex id {vertex} out of range")
        return vertex % self.cols, vertex // self.cols


@dataclass(frozen=True)
class WeightedGraphStructure:
    """Directed weighted graph with geodesic costs and transport neighborhoods.

    ``cost[i, j]`` is the cheapest directed path cost from i to j
    (``inf`` when unreachable, ``self_cost`` on the diagonal).
    ``neighborhoods[i]`` is the ascending-id array of vertices reachable
    from i within ``order`` hops, always containing i itself; the position
    of a vertex inside this array fixes the flow-variable layout used by
    the transport LP, so the ordering is part of the contract.
    """

    n: int
    edges: tuple[tuple[int, int, float], ...]
    cost: np.ndarray
    neighborhoods: tuple[np.ndarray, ...]
    order: int
    self_cost: float = 0.0
    hex_spec: HexGridSpec | None = None

    def __post_init__(self) -> None:
        self.cost.setflags(write=False)
        for nb in self.neighborhoods:
            nb.setflags(write=False)

    @property
    def neighborhood_sizes(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighborhoods])

    def out_neighbors(self, i: int) -> list[int]:
        """Direct (first-hop) successors of i, ascending, excluding i."""
        return sorted(j for (a, j, _) in self.edges if a == i and j != i)

    def max_first_order_cost(self) -> float:
        """Largest geodesic cost to a direct successor, 0 if no edges."""
        best = 0.0
        for i, j, _ in self.edges:
            if i != j and np.isfinite(self.cost[i, j]):
                best = max(best, float(self.cost[i, j]))
        return best


def geodesic_costs(
    n: int,
    edges: list[tuple[int, int, float]] | tuple[tuple[int, int, float], ...],
    self_cost: float = 0.0,
) -> np.ndarray:
    """All-pairs cheapest directed path costs (Dijkstra from each source).

    Absent pairs come back as ``inf``; the diagonal is forced to
    ``self_cost`` regardless of any self-loops or cycles.
    """
    if self_cost < 0:
        raise ValueError("self_cost must be nonnegative")
    weights = np.full((n, n), np.inf)
    for i, j, w in edges:
        if w < 0:
            raise ValueError(f"negative edge weight on ({i}, {j}): {w}")
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"edge ({i}, {j}) references unknown vertex")
        weights[i, j] = min(weights[i, j], w)
    if n == 0:
        return weights
    # csgraph_from_dense keeps zero-weight edges, which plain sparse drops.
    sparse = csgraph_from_dense(weights, null_value=np.inf)
    cost = dijkstra(sparse, directed=True)
    np.fill_diagonal(cost, self_cost)
    return cost


def _bfs_layers(n: int, adjacency: list[list[int]], order: int) -> tuple[np.ndarray, ...]:
    """Vertices within ``order`` hops of each source, ascending ids."""
    result = []
    for src in range(n):
        seen = {src}
        frontier = [src]
        for _ in range(order):
            nxt = []
            for u in frontier:
                for v in adjacency[u]:
                    if v not in seen:
                        seen.add(v)
                        nxt.append(v)
            if not nxt:
                break
            frontier = nxt
        result.append(np.array(sorted(seen), dtype=np.int64))
    return tuple(result)


def build_hex_grid(spec: HexGridSpec, neighborhood_order: int = 2) -> WeightedGraphStructure:
    """Build the weighted graph structure for a hex tessellation.

    Directed edges connect lattice-adjacent cells at ``adjacent_distance_m``
    unless the pair is blocked; neighborhoods are breadth-first layers on the
    resulting adjacency, so a blocked direct pair can still enter a
    neighborhood through a detour of at most ``neighborhood_order`` hops.
    """
    if neighborhood_order < 0:
        raise ValueError("neighborhood_order must be >= 0")
    n = spec.n
    in_grid = {}
    for r in range(spec.rows):
        for q in range(spec.cols):
            in_grid[(q, r)] = spec.vertex_id(q, r)
    edges: list[tuple[int, int, float]] = []
    adjacency: list[list[int]] = [[] for _ in range(n)]
    for (q, r), i in in_grid.items():
        for dq, dr in HEX_DIRECTIONS:
            j = in_grid.get((q + dq, r + dr))
            if j is None or (i, j) in spec.blocked:
                continue
            edges.append((i, j, spec.adjacent_distance_m))
            adjacency[i].append(j)
    for nb in adjacency:
        nb.sort()
    cost = geodesic_costs(n, edges, self_cost=0.0)
    neighborhoods = _bfs_layers(n, adjacency, neighborhood_order)
    log.debug("built %dx%d hex grid: n=%d, edges=%d", spec.rows, spec.cols, n, len(edges))
    return WeightedGraphStructure(
        n=n,
        edges=tuple(sorted(edges)),
        cost=cost,
        neighborhoods=neighborhoods,
        order=neighborhood_order,
        self_cost=0.0,
        hex_spec=spec,
    )


def from_edges(
    n: int,
    edges: list[tuple[int, int, float]],
    neighborhood_order: int = 2,
    self_cost: float = 0.0,
) -> WeightedGraphStructure:
    """Generic graph constructor used for non-hex inputs and tests."""
    if n < 1:
        raise ValueError("graph needs at least one vertex")
    cost = geodesic_costs(n, edges, self_cost=self_cost)
    adjacency: list[list[int]] = [[] for _ in range(n)]
    for i, j, _ in edges:
        if j != i and j not in adjacency[i]:
            adjacency[i].append(j)
    for nb in adjacency:
        nb.sort()
    neighborhoods = _bfs_layers(n, adjacency, neighborhood_order)
    return WeightedGraphStructure(
        n=n,
        edges=tuple(sorted(edges)),
        cost=cost,
        neighborhoods=neighborhoods,
        order=neighborhood_order,
        self_cost=self_cost,
    )


def neighborhood(graph: WeightedGraphStructure, i: int) -> np.ndarray:
    """Transport neighborhood of vertex i, ascending vertex ids."""
    if not (0 <= i < graph.n):
        raise ValueError(f"vertex id {i} out of range for graph of size {graph.n}")
    return graph.neighborhoods[i]


def with_self_cost(graph: WeightedGraphStructure, self_cost: float) -> WeightedGraphStructure:
    """Copy of the graph with a different within-vertex transport cost."""
    if self_cost < 0:
        raise ValueError("self_cost must be nonnegative")
    cost = graph.cost.copy()
    np.fill_diagonal(cost, self_cost)
    return WeightedGraphStructure(
        n=graph.n,
        edges=graph.edges,
        cost=cost,
        neighborhoods=graph.neighborhoods,
        order=graph.order,
        self_cost=self_cost,
        hex_spec=graph.hex_spec,
    )


def graph_to_json(graph: WeightedGraphStructure) -> str:
    """Deterministic JSON serialization of a hex-grid graph."""
    spec = graph.hex_spec
    if spec is None:
        raise ValueError("only hex-grid graphs have a file representation")
    payload = {
        "side_length_m": spec.side_length_m,
        "adjacent_distance_m": spec.adjacent_distance_m,
        "rows": spec.rows,
        "cols": spec.cols,
        "vertices": [
            {"id": i, "q": spec.axial(i)[0], "r": spec.axial(i)[1]} for i in range(graph.n)
        ],
        "blocked": [{"from": i, "to": j} for i, j in sorted(spec.blocked)],
        "neighborhood_order": graph.order,
        "self_cost": graph.self_cost,
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def graph_from_json(text: str) -> WeightedGraphStructure:
    payload = json.loads(text)
    blocked = frozenset((b["from"], b["to"]) for b in payload.get("blocked", []))
    spec = HexGridSpec(
        rows=payload["rows"],
        cols=payload["cols"],
        side_length_m=payload["side_length_m"],
        adjacent_distance_m=payload["adjacent_distance_m"],
        blocked=blocked,
    )
    graph = build_hex_grid(spec, neighborhood_order=payload.get("neighborhood_order", 2))
    self_cost = payload.get("self_cost", 0.0)
    if self_cost:
        graph = with_self_cost(graph, self_cost)
    return graph


def save_graph(graph: WeightedGraphStructure, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(graph_to_json(graph))
        fh.write("\n")


def load_graph(path) -> WeightedGraphStructure:
    with open(path, encoding="utf-8") as fh:
        return graph_from_json(fh.read())
