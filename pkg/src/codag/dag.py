"""Depth, height and route enumeration on directed graphs.

Graphs are duck-typed: any object with ``n_nodes``, ``tails`` and ``heads``
works (:class:`~codag.network.OriginalNetwork`, :class:`~codag.builder.CoDAG`
or the lightweight :class:`Digraph`).

Heights follow the convention ``m_{a,r} = |r| - l_{a,r} + 1``, so an arc
entering the destination has height 1 and an arc leaving the origin has
depth 1.  Node depth is the largest depth of an incoming arc (0 at the
origin); node height is the largest height of an outgoing arc (0 at the
destination).
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .exceptions import CoverageError, EnumerationLimitError, NotADAGError

DEFAULT_ROUTE_CAP = 10**6


def default_route_cap() -> int:
    """Enumeration cap, overridable through ``CODAG_ROUTE_CAP``."""
    env = os.environ.get("CODAG_ROUTE_CAP")
    return int(env) if env else DEFAULT_ROUTE_CAP


@dataclass(frozen=True)
class Digraph:
    n_nodes: int
    tails: tuple[int, ...]
    heads: tuple[int, ...]


def _out_lists(g):
    out = [[] for _ in range(g.n_nodes)]
    for a, i in enumerate(g.tails):
        out[i].append(a)
    return out


def enumerate_routes(g, origin: int, destination: int, cap: int | None = None):
    """All simple routes from ``origin`` to ``destination`` as arc-id tuples.

    Routes come out in lexicographic order of their arc-id sequences.
    """
    cap = default_route_cap() if cap is None else cap
    out = _out_lists(g)
    heads = g.heads
    routes = []
    visited = [False] * g.n_nodes
    path = []

    # iterative DFS; each frame holds (node, position in its out list)
    visited[origin] = True
    stack = [[origin, 0]]
    while stack:
        frame = stack[-1]
        u, k = frame
        if u == destination:
            routes.append(tuple(path))
            if len(routes) > cap:
                raise EnumerationLimitError(f"more than {cap} routes")
            stack.pop()
            visited[u] = False
            if path:
                path.pop()
            continue
        if k == len(out[u]):
            stack.pop()
            visited[u] = False
            if path:
                path.pop()
            continue
        frame[1] += 1
        a = out[u][k]
        v = heads[a]
        if not visited[v]:
            visited[v] = True
            path.append(a)
            stack.append([v, 0])
    return routes


def topological_node_order(g) -> list[int]:
    """Kahn's algorithm; raises :class:`NotADAGError` on a cycle."""
    indeg = [0] * g.n_nodes
    for j in g.heads:
        indeg[j] += 1
    out = _out_lists(g)
    queue = deque(sorted(i for i in range(g.n_nodes) if indeg[i] == 0))
    order = []
    while queue:
        u = queue.popleft()
        order.append(u)
        for a in out[u]:
            v = g.heads[a]
            indeg[v] -= 1
            if indeg[v] == 0:
                queue.append(v)
    if len(order) != g.n_nodes:
        raise NotADAGError("graph contains a directed cycle")
    return order


@dataclass(frozen=True)
class DepthHeightTable:
    arc_depth: np.ndarray
    arc_height: np.ndarray
    node_depth: np.ndarray
    node_height: np.ndarray
    depth: int = field(init=False)
    height: int = field(init=False)

    def __post_init__(self):
        for name in ("arc_depth", "arc_height", "node_depth", "node_height"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "depth", int(self.arc_depth.max(initial=0)))
        object.__setattr__(self, "height", int(self.arc_height.max(initial=0)))

    def equals(self, other: "DepthHeightTable") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("arc_depth", "arc_height", "node_depth", "node_height"))


def compute_depth_height(g, origin: int, destination: int) -> DepthHeightTable:
    """Depths and heights by longest-path dynamic programming over a DAG."""
    order = topological_node_order(g)
    n, m = g.n_nodes, len(g.tails)
    out = _out_lists(g)
    inc = [[] for _ in range(n)]
    for a, j in enumerate(g.heads):
        inc[j].append(a)

    # -1 marks "not reachable from the origin" / "cannot reach the destination"
    node_depth = np.full(n, -1, dtype=np.int64)
    node_depth[origin] = 0
    arc_depth = np.full(m, -1, dtype=np.int64)
    for u in order:
        if u != origin and inc[u]:
            best = max(arc_depth[a] for a in inc[u])
            node_depth[u] = best
        if node_depth[u] < 0 or u == destination:
            continue
        for a in out[u]:
            arc_depth[a] = node_depth[u] + 1

    node_height = np.full(n, -1, dtype=np.int64)
    node_height[destination] = 0
    arc_height = np.full(m, -1, dtype=np.int64)
    for u in reversed(order):
        if u != destination and out[u]:
            node_height[u] = max(arc_height[a] for a in out[u])
        if node_height[u] < 0 or u == origin:
            continue
        for a in inc[u]:
            arc_height[a] = node_height[u] + 1

    dangling = [a for a in range(m) if arc_depth[a] < 1 or arc_height[a] < 1]
    if dangling:
        raise CoverageError(f"arcs on no origin-destination route: {dangling}")
    return DepthHeightTable(arc_depth, arc_height, node_depth, node_height)


def depth_height_from_routes(g, routes, origin: int, destination: int) -> DepthHeightTable:
    """Depth/height straight from the max-over-routes definition.

    Exhaustive and slow; serves as the reference for the dynamic program.
    """
    n, m = g.n_nodes, len(g.tails)
    arc_depth = np.zeros(m, dtype=np.int64)
    arc_height = np.zeros(m, dtype=np.int64)
    for r in routes:
        L = len(r)
        for pos, a in enumerate(r, start=1):
            arc_depth[a] = max(arc_depth[a], pos)
            arc_height[a] = max(arc_height[a], L - pos + 1)
    node_depth = np.zeros(n, dtype=np.int64)
    node_height = np.zeros(n, dtype=np.int64)
    for a in range(m):
        if arc_depth[a] == 0:
            raise CoverageError(f"arc {a} lies on no route")
        j, i = g.heads[a], g.tails[a]
        if j != origin:
            node_depth[j] = max(node_depth[j], arc_depth[a])
        if i != destination:
            node_height[i] = max(node_height[i], arc_height[a])
    return DepthHeightTable(arc_depth, arc_height, node_depth, node_height)


@dataclass
class ClauseResult:
    passed: bool = True
    counterexample: object = None

    def fail(self, example):
        if self.passed:
            self.passed = False
            self.counterexample = example


@dataclass
class StructureReport:
    clauses: dict[str, ClauseResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses.values())

    def to_dict(self) -> dict:
        def _plain(x):
            if isinstance(x, (tuple, list)):
                return [_plain(v) for v in x]
            if isinstance(x, dict):
                return {k: _plain(v) for k, v in x.items()}
            if isinstance(x, np.integer):
                return int(x)
            return x
        return {
            "passed": self.passed,
            "clauses": {name: {"passed": c.passed, "counterexample": _plain(c.counterexample)}
                        for name, c in self.clauses.items()},
        }


CLAUSES = (
    "depth_1_origin_and_deepest", "depth_2_increasing", "depth_3_prefix_tight",
    "depth_4_levels_occupied", "height_1_destination_and_highest",
    "height_2_decreasing", "height_3_suffix_tight", "height_4_levels_occupied",
)


def verify_structure(g, table: DepthHeightTable, origin: int, destination: int,
                     routes=None, cap: int | None = None) -> StructureReport:
    """Check the eight depth/height properties by scanning every route.

    Failures carry a counterexample (an arc id, a route, or a missing level).
    A route-free DAG (every route of length 1) passes the monotonicity
    clauses vacuously.
    """
    if routes is None:
        routes = enumerate_routes(g, origin, destination, cap)
    res = {name: ClauseResult() for name in CLAUSES}
    dep, hgt = table.arc_depth, table.arc_height
    L, M = table.depth, table.height

    for a in range(len(g.tails)):
        if (dep[a] == 1) != (g.tails[a] == origin):
            res["depth_1_origin_and_deepest"].fail({"arc": a})
        if dep[a] == L and g.heads[a] != destination:
            res["depth_1_origin_and_deepest"].fail({"arc": a})
        if (hgt[a] == 1) != (g.heads[a] == destination):
            res["height_1_destination_and_highest"].fail({"arc": a})
        if hgt[a] == M and g.tails[a] != origin:
            res["height_1_destination_and_highest"].fail({"arc": a})

    for r in routes:
        d = [int(dep[a]) for a in r]
        h = [int(hgt[a]) for a in r]
        if any(x >= y for x, y in zip(d, d[1:])):
            res["depth_2_increasing"].fail({"route": r})
        if any(x <= y for x, y in zip(h, h[1:])):
            res["height_2_decreasing"].fail({"route": r})
        n = len(r)
        for k in range(n):
            if d[k] == k + 1 and any(d[j] != j + 1 for j in range(k)):
                res["depth_3_prefix_tight"].fail({"route": r, "arc": r[k]})
            if h[k] == n - k and any(h[j] != n - j for j in range(k + 1, n)):
                res["height_3_suffix_tight"].fail({"route": r, "arc": r[k]})

    for level in range(1, L + 1):
        if not np.any(dep == level):
            res["depth_4_levels_occupied"].fail({"level": level})
    for level in range(1, M + 1):
        if not np.any(hgt == level):
            res["height_4_levels_occupied"].fail({"level": level})
    return StructureReport(res)


def topological_orders(g, table: DepthHeightTable):
    """Arc orders ascending in depth and in height, ties broken by arc id."""
    ids = np.arange(len(g.tails))
    by_depth = np.lexsort((ids, table.arc_depth))
    by_height = np.lexsort((ids, table.arc_height))
    return by_depth, by_height
