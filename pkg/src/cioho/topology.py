"""Cell graph, its line graph, hop neighbourhoods and critic regions.

Every vector layout downstream (actions, logits, KPI rows) follows the
canonical orderings defined here: cells sorted ascending, edges as
``(i, j)`` pairs with ``i < j`` sorted lexicographically.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

Edge = tuple[int, int]


class TopologyError(ValueError):
    pass


def canonical_edge(i: int, j: int) -> Edge:
    if i == j:
        raise TopologyError(f"self-loop on cell {i}")
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class NetworkGraph:
    """Undirected primal graph of cells and neighbour relations."""

    cells: tuple[int, ...]
    edges: tuple[Edge, ...]
    adjacency: Mapping[int, frozenset[int]] = field(repr=False, compare=False)

    @classmethod
    def from_edges(cls, cells: Iterable[int], edges: Iterable[Sequence[int]],
                   require_connected: bool = True) -> "NetworkGraph":
        cell_t = tuple(sorted({int(c) for c in cells}))
        cell_set = set(cell_t)
        canon = set()
        for e in edges:
            i, j = int(e[0]), int(e[1])
            if i not in cell_set or j not in cell_set:
                raise TopologyError(f"edge {{{i},{j}}} references unknown cell")
            canon.add(canonical_edge(i, j))
        edge_t = tuple(sorted(canon))
        adj: dict[int, set[int]] = {c: set() for c in cell_t}
        for i, j in edge_t:
            adj[i].add(j)
            adj[j].add(i)
        g = cls(cell_t, edge_t, {c: frozenset(n) for c, n in adj.items()})
        if require_connected and len(cell_t) > 1 and not g.is_connected():
            raise TopologyError("cell graph is not connected")
        return g

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def nodes(self) -> tuple[int, ...]:
        return self.cells

    def neighbors(self, node: int) -> frozenset[int]:
        return self.adjacency[node]

    def degree(self, cell: int) -> int:
        return len(self.adjacency[cell])

    def cell_index(self, cell: int) -> int:
        return self.cells.index(cell)

    def edge_index(self, edge: Sequence[int]) -> int:
        return self.edges.index(canonical_edge(int(edge[0]), int(edge[1])))

    def is_connected(self) -> bool:
        if not self.cells:
            return True
        return len(bfs_distances(self, self.cells[0])) == len(self.cells)

    def diameter(self) -> int:
        return max(max(bfs_distances(self, c).values()) for c in self.cells)

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.n_cells, self.n_cells))
        for i, j in self.edges:
            a[self.cell_index(i), self.cell_index(j)] = 1.0
            a[self.cell_index(j), self.cell_index(i)] = 1.0
        return a

    def fingerprint(self) -> tuple:
        return (self.cells, self.edges)


@dataclass(frozen=True)
class DualGraph:
    """Line graph of a :class:`NetworkGraph`; one node per primal edge."""

    nodes: tuple[Edge, ...]
    dual_edges: tuple[tuple[int, int], ...]  # index pairs (a, b), a < b
    adjacency: Mapping[Edge, frozenset[Edge]] = field(repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def node_index(self) -> dict[Edge, int]:
        return {e: k for k, e in enumerate(self.nodes)}

    def neighbors(self, node: Edge) -> frozenset[Edge]:
        return self.adjacency[node]

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        for p, q in self.dual_edges:
            a[p, q] = a[q, p] = 1.0
        return a

    def directed_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """(src, dst) index arrays with both orientations of every dual edge."""
        src = [p for p, q in self.dual_edges] + [q for p, q in self.dual_edges]
        dst = [q for p, q in self.dual_edges] + [p for p, q in self.dual_edges]
        return np.asarray(src, dtype=int), np.asarray(dst, dtype=int)


def build_dual_graph(g: NetworkGraph) -> DualGraph:
    if not g.edges:
        raise TopologyError("no controllable CIOs")
    nodes = g.edges
    incident: dict[int, list[int]] = {c: [] for c in g.cells}
    for k, (i, j) in enumerate(nodes):
        incident[i].append(k)
        incident[j].append(k)
    pairs = set()
    for ks in incident.values():
        for a in range(len(ks)):
            for b in range(a + 1, len(ks)):
                pairs.add((min(ks[a], ks[b]), max(ks[a], ks[b])))
    dual_edges = tuple(sorted(pairs))
    adj: dict[Edge, set[Edge]] = {e: set() for e in nodes}
    for p, q in dual_edges:
        adj[nodes[p]].add(nodes[q])
        adj[nodes[q]].add(nodes[p])
    return DualGraph(nodes, dual_edges, {e: frozenset(s) for e, s in adj.items()})


def bfs_distances(graph: NetworkGraph | DualGraph, root: Hashable,
                  max_depth: int | None = None) -> dict:
    if root not in graph.adjacency:
        raise TopologyError(f"unknown node {root!r}")
    dist = {root: 0}
    queue = deque([root])
    while queue:
        v = queue.popleft()
        if max_depth is not None and dist[v] >= max_depth:
            continue
        for w in sorted(graph.adjacency[v]):
            if w not in dist:
                dist[w] = dist[v] + 1
                queue.append(w)
    return dist


def k_hop_neighborhood(graph: NetworkGraph | DualGraph, root: Hashable, k: int) -> frozenset:
    """Closed BFS ball of radius ``k`` around ``root``."""
    if k < 0:
        raise TopologyError("hop count must be non-negative")
    return frozenset(bfs_distances(graph, root, max_depth=k))


@dataclass(frozen=True)
class Region:
    index: int
    center: int
    hops: int
    cells: tuple[int, ...]
    induced_edges: tuple[Edge, ...]
    cell_idx: np.ndarray = field(repr=False, compare=False)
    edge_idx: np.ndarray = field(repr=False, compare=False)
    graph_key: tuple = field(repr=False, compare=False)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return len(self.induced_edges)


def _region(g: NetworkGraph, index: int, center: int, hops: int, cells: set[int]) -> Region:
    cell_t = tuple(c for c in g.cells if c in cells)
    edges = tuple(e for e in g.edges if e[0] in cells and e[1] in cells)
    return Region(
        index=index, center=center, hops=hops, cells=cell_t, induced_edges=edges,
        cell_idx=np.array([g.cell_index(c) for c in cell_t], dtype=int),
        edge_idx=np.array([g.edge_index(e) for e in edges], dtype=int),
        graph_key=g.fingerprint(),
    )


def _site_ball(g: NetworkGraph, center: int, hops: int,
               sites: Mapping[int, Hashable] | None) -> set[int]:
    if sites is None:
        return set(k_hop_neighborhood(g, center, hops))
    # collapse co-sited cells into one BFS node
    site_adj: dict[Hashable, set[Hashable]] = {}
    for c in g.cells:
        site_adj.setdefault(sites[c], set())
    for i, j in g.edges:
        si, sj = sites[i], sites[j]
        if si != sj:
            site_adj[si].add(sj)
            site_adj[sj].add(si)
    seen = {sites[center]: 0}
    queue = deque([sites[center]])
    while queue:
        s = queue.popleft()
        if seen[s] >= hops:
            continue
        for t in site_adj[s]:
            if t not in seen:
                seen[t] = seen[s] + 1
                queue.append(t)
    return {c for c in g.cells if sites[c] in seen}


def decompose_regions(g: NetworkGraph, centers: Sequence[int], hops: int,
                      sites: Mapping[int, Hashable] | None = None) -> list[Region]:
    """One N-hop region per center; raises if the regions miss any cell."""
    if not centers:
        raise TopologyError("at least one region center is required")
    if hops < 0:
        raise TopologyError("hop count must be non-negative")
    if len(set(centers)) != len(centers):
        raise TopologyError(f"duplicate region centers in {list(centers)}")
    for c in centers:
        if c not in g.adjacency:
            raise TopologyError(f"unknown region center {c}")
    regions = [_region(g, k, c, hops, _site_ball(g, c, hops, sites))
               for k, c in enumerate(centers)]
    covered = set().union(*(r.cells for r in regions))
    missing = [c for c in g.cells if c not in covered]
    if missing:
        raise TopologyError(f"regions do not cover cells {missing}")
    return regions


def centralized_region(g: NetworkGraph) -> Region:
    """The J=1 region spanning the whole graph."""
    return decompose_regions(g, [g.cells[0]], max(g.diameter(), 0))[0]


def greedy_centers(g: NetworkGraph, hops: int,
                   sites: Mapping[int, Hashable] | None = None) -> list[int]:
    """Greedy max-coverage choice of region centers (lowest id wins ties)."""
    balls = {c: _site_ball(g, c, hops, sites) for c in g.cells}
    uncovered = set(g.cells)
    centers: list[int] = []
    while uncovered:
        best = max(g.cells, key=lambda c: (len(balls[c] & uncovered), -c))
        centers.append(best)
        uncovered -= balls[best]
    return centers


def restrict(region: Region, state: np.ndarray, action: np.ndarray,
             reward_per_cell: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Restrict a per-cell state, per-edge action and per-cell throughput to a region.

    ``state`` has one row per cell, ``action`` one entry per edge (both in
    canonical graph order), ``reward_per_cell`` one entry per cell.
    """
    state = np.asarray(state)
    action = np.asarray(action)
    reward_per_cell = np.asarray(reward_per_cell, dtype=float)
    n_cells, n_edges = len(region.graph_key[0]), len(region.graph_key[1])
    if state.shape[0] != n_cells or reward_per_cell.shape[0] != n_cells:
        raise TopologyError(
            f"state covers {state.shape[0]} cells but region graph has {n_cells}")
    if action.shape[0] != n_edges:
        raise TopologyError(
            f"action covers {action.shape[0]} edges but region graph has {n_edges}")
    region_return = float(sum(reward_per_cell[k] for k in region.cell_idx))
    return state[region.cell_idx], action[region.edge_idx], region_return


def write_edge_list(path, pairs: Iterable[Sequence], header: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {header}\n")
        for p in pairs:
            fh.write(" ".join(str(x) for x in p) + "\n")
