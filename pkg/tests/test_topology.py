import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cioho.scenario import load_scenario
from cioho.topology import (NetworkGraph, TopologyError, bfs_distances, build_dual_graph, centralized_region,
                            decompose_regions, greedy_centers, k_hop_neighborhood, restrict)


def path(n):
    return NetworkGraph.from_edges(range(1, n + 1), [(i, i + 1) for i in range(1, n)])


@st.composite
def connected_graphs(draw, max_cells=9):
    n = draw(st.integers(2, max_cells))
    # random spanning tree plus extra edges keeps the graph connected
    edges = set()
    for k in range(2, n + 1):
        edges.add((draw(st.integers(1, k - 1)), k))
    extra = draw(st.lists(st.tuples(st.integers(1, n), st.integers(1, n)), max_size=n))
    edges |= {(min(a, b), max(a, b)) for a, b in extra if a != b}
    return NetworkGraph.from_edges(range(1, n + 1), sorted(edges))


def test_edges_stored_canonically():
    g = NetworkGraph.from_edges([3, 1, 2], [(2, 1), (3, 2), (1, 2)])
    assert g.cells == (1, 2, 3)
    assert g.edges == ((1, 2), (2, 3))


@pytest.mark.parametrize("edges, msg", [([(1, 1)], "self-loop"), ([(1, 4)], "unknown cell")])
def test_invalid_edges_rejected(edges, msg):
    with pytest.raises(TopologyError, match=msg):
        NetworkGraph.from_edges([1, 2, 3], edges)


def test_disconnected_rejected():
    with pytest.raises(TopologyError, match="not connected"):
        NetworkGraph.from_edges([1, 2, 3, 4], [(1, 2), (3, 4)])


def test_dual_of_path_and_triangle():
    d = build_dual_graph(path(3))
    assert d.nodes == ((1, 2), (2, 3))
    assert len(d.dual_edges) == 1
    tri = build_dual_graph(NetworkGraph.from_edges([1, 2, 3], [(1, 2), (2, 3), (1, 3)]))
    assert tri.n_nodes == 3 and len(tri.dual_edges) == 3


def test_dual_requires_edges():
    g = NetworkGraph.from_edges([1], [])
    with pytest.raises(TopologyError, match="no controllable CIOs"):
        build_dual_graph(g)


def test_bench8_dual_has_eight_agents():
    g = load_scenario("bench8").graph
    assert g.n_cells == 8
    assert build_dual_graph(g).n_nodes == 8


@settings(max_examples=60, deadline=None)
@given(connected_graphs())
def test_line_graph_degree_identity(g):
    d = build_dual_graph(g)
    for e in d.nodes:
        assert len(d.neighbors(e)) == g.degree(e[0]) + g.degree(e[1]) - 2
    assert len(d.dual_edges) == sum(g.degree(c) * (g.degree(c) - 1) // 2 for c in g.cells)


@settings(max_examples=30, deadline=None)
@given(connected_graphs())
def test_dual_is_deterministic(g):
    a, b = build_dual_graph(g), build_dual_graph(g)
    assert a.nodes == b.nodes and a.dual_edges == b.dual_edges
    assert np.array_equal(a.adjacency_matrix(), b.adjacency_matrix())


def test_k_hop_examples():
    g = path(4)
    assert k_hop_neighborhood(g, 1, 0) == {1}
    assert k_hop_neighborhood(g, 1, 2) == {1, 2, 3}
    with pytest.raises(TopologyError):
        k_hop_neighborhood(g, 9, 1)


@settings(max_examples=40, deadline=None)
@given(connected_graphs(), st.data())
def test_k_hop_monotone_and_saturating(g, data):
    root = data.draw(st.sampled_from(g.cells))
    balls = [k_hop_neighborhood(g, root, k) for k in range(g.diameter() + 2)]
    for a, b in zip(balls, balls[1:]):
        assert a <= b
    assert balls[g.diameter()] == set(g.cells)
    dist = bfs_distances(g, root)
    assert balls[1] == {c for c, d in dist.items() if d <= 1}


def test_centralized_region_is_whole_graph():
    g = load_scenario("bench8").graph
    r = centralized_region(g)
    assert r.cells == g.cells and r.induced_edges == g.edges
    whole = decompose_regions(g, [5], g.diameter())[0]
    assert whole.cells == g.cells


def test_two_centers_on_six_path_overlap():
    g = path(6)
    r1, r2 = decompose_regions(g, [2, 5], 2)
    assert set(r1.cells) | set(r2.cells) == set(g.cells)
    assert set(r1.cells) & set(r2.cells) == {3, 4}
    for r in (r1, r2):
        assert all(i in r.cells and j in r.cells for i, j in r.induced_edges)


def test_region_errors():
    g = path(6)
    with pytest.raises(TopologyError, match=r"do not cover cells \[4, 5, 6\]"):
        decompose_regions(g, [1], 2)
    with pytest.raises(TopologyError, match="duplicate"):
        decompose_regions(g, [2, 2], 3)
    with pytest.raises(TopologyError):
        decompose_regions(g, [], 1)


def test_site_grouping_collapses_cosited_cells():
    g = NetworkGraph.from_edges([1, 2, 3, 4], [(1, 2), (2, 3), (3, 4)])
    sites = {1: "a", 2: "a", 3: "b", 4: "c"}
    r, _ = decompose_regions(g, [1, 4], 1, sites)
    assert r.cells == (1, 2, 3)


def test_greedy_centers_cover():
    g = load_scenario("grid30").graph
    centers = greedy_centers(g, 2)
    regions = decompose_regions(g, centers, 2)
    assert set().union(*(r.cells for r in regions)) == set(g.cells)


def test_restrict_examples():
    g = path(3)
    r = decompose_regions(g, [1, 3], 1)[0]
    state = np.arange(12.0).reshape(3, 4)
    s, a, ret = restrict(r, state, np.array([5, 6]), np.array([1.0, 2.0, 4.0]))
    assert np.array_equal(s, state[:2])
    assert a.tolist() == [5]
    assert ret == 3.0
    full = centralized_region(g)
    s, a, ret = restrict(full, state, np.array([5, 6]), np.array([1.0, 2.0, 4.0]))
    assert np.array_equal(s, state) and a.tolist() == [5, 6] and ret == 7.0


def test_restrict_rejects_foreign_layout():
    g = path(3)
    r = decompose_regions(g, [1, 3], 1)[0]
    with pytest.raises(TopologyError):
        restrict(r, np.zeros((4, 2)), np.zeros(2), np.zeros(4))


def test_restriction_composes():
    g = load_scenario("bench8").graph
    rng = np.random.default_rng(3)
    full = centralized_region(g)
    for center, hops in itertools.product(g.cells, (0, 1, 2)):
        # listing every cell as a center guarantees coverage; keep the first region only
        r = decompose_regions(g, [center, *[c for c in g.cells if c != center]], hops)[0]
        state = rng.normal(size=(8, 5))
        action = rng.integers(0, 7, 8)
        tp = rng.random(8)
        s_full, a_full, _ = restrict(full, state, action, tp)
        assert np.array_equal(restrict(r, s_full, a_full, tp)[0], restrict(r, state, action, tp)[0])
        assert np.array_equal(restrict(r, s_full, a_full, tp)[1], restrict(r, state, action, tp)[1])
        assert restrict(r, state, action, tp)[2] == sum(tp[g.cell_index(c)] for c in r.cells)
