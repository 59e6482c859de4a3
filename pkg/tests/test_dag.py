import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_routes

from codag import build_codag
from codag.dag import (
    CLAUSES, DepthHeightTable, Digraph, compute_depth_height, default_route_cap,
    depth_height_from_routes, enumerate_routes, topological_node_order, topological_orders,
    verify_structure,
)
from codag.exceptions import CoverageError, EnumerationLimitError, NotADAGError
from codag.fixtures import figure1_network, random_network

# 0 -> 1 -> 2 plus the shortcut 0 -> 2
TRIANGLE = Digraph(3, (0, 1, 0), (1, 2, 2))


def test_triangle_by_hand():
    t = compute_depth_height(TRIANGLE, 0, 2)
    assert t.arc_depth.tolist() == [1, 2, 1]
    assert t.arc_height.tolist() == [2, 1, 1]
    assert t.node_depth.tolist() == [0, 1, 2]
    assert t.node_height.tolist() == [2, 1, 0]
    assert (t.depth, t.height) == (2, 2)


def test_single_arc():
    g = Digraph(2, (0,), (1,))
    t = compute_depth_height(g, 0, 1)
    assert t.arc_depth.tolist() == [1] and t.arc_height.tolist() == [1]
    assert verify_structure(g, t, 0, 1).passed


def test_routes_lexicographic_and_complete():
    net = figure1_network()
    routes = enumerate_routes(net, net.origin, net.destination)
    assert routes == sorted(routes)
    assert set(routes) == brute_force_routes(net, net.origin, net.destination)
    assert len(routes) == 10


@given(st.integers(0, 2**32 - 1), st.booleans())
@settings(max_examples=80, deadline=None)
def test_routes_match_brute_force(seed, acyclic):
    net = random_network(np.random.default_rng(seed), max_nodes=7, max_arcs=14, acyclic=acyclic)
    routes = enumerate_routes(net, net.origin, net.destination)
    assert len(routes) == len(set(routes))
    assert set(routes) == brute_force_routes(net, net.origin, net.destination)


def test_route_cap(monkeypatch):
    net = figure1_network()
    with pytest.raises(EnumerationLimitError):
        enumerate_routes(net, net.origin, net.destination, cap=9)
    assert len(enumerate_routes(net, net.origin, net.destination, cap=10)) == 10
    monkeypatch.setenv("CODAG_ROUTE_CAP", "4")
    assert default_route_cap() == 4
    with pytest.raises(EnumerationLimitError):
        enumerate_routes(net, net.origin, net.destination)


def test_cycle_detected():
    net = figure1_network()  # has the 2 <-> 3 two-cycle
    with pytest.raises(NotADAGError):
        topological_node_order(net)
    with pytest.raises(NotADAGError):
        compute_depth_height(net, net.origin, net.destination)


def test_dangling_arc():
    g = Digraph(4, (0, 1, 0), (1, 2, 3))  # node 3 never reaches 2
    with pytest.raises(CoverageError):
        compute_depth_height(g, 0, 2)
    with pytest.raises(CoverageError):
        depth_height_from_routes(g, enumerate_routes(g, 0, 2), 0, 2)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_dp_matches_route_definition(seed):
    g = build_codag(random_network(np.random.default_rng(seed)))
    routes = g.routes()
    oracle = depth_height_from_routes(g, routes, g.origin, g.destination)
    assert g.table.equals(oracle)
    assert verify_structure(g, g.table, g.origin, g.destination, routes=routes).passed


def test_structure_report_counterexamples():
    t = compute_depth_height(TRIANGLE, 0, 2)
    ok = verify_structure(TRIANGLE, t, 0, 2)
    assert ok.passed and set(ok.clauses) == set(CLAUSES)
    # swap the heights of the chain arcs: monotonicity breaks along route (0, 1)
    bad = DepthHeightTable(t.arc_depth, np.array([1, 2, 1]), t.node_depth, t.node_height)
    rep = verify_structure(TRIANGLE, bad, 0, 2)
    assert not rep.passed
    assert not rep.clauses["height_2_decreasing"].passed
    assert rep.clauses["height_2_decreasing"].counterexample == {"route": (0, 1)}
    d = rep.to_dict()
    assert d["passed"] is False and d["clauses"]["depth_2_increasing"]["passed"] is True


def test_missing_level_flagged():
    t = compute_depth_height(TRIANGLE, 0, 2)
    gap = DepthHeightTable(np.array([1, 3, 1]), t.arc_height, t.node_depth, t.node_height)
    rep = verify_structure(TRIANGLE, gap, 0, 2)
    assert rep.clauses["depth_4_levels_occupied"].counterexample == {"level": 2}


def test_topological_orders():
    g = build_codag(figure1_network())
    by_depth, by_height = topological_orders(g, g.table)
    assert np.all(np.diff(g.table.arc_depth[by_depth]) >= 0)
    assert np.all(np.diff(g.table.arc_height[by_height]) >= 0)
    assert sorted(by_depth.tolist()) == list(range(g.n_arcs))
    # along every route the depth order visits arcs first-to-last
    pos = np.empty(g.n_arcs, dtype=int)
    pos[by_depth] = np.arange(g.n_arcs)
    for r in g.routes():
        assert list(pos[list(r)]) == sorted(pos[list(r)])
