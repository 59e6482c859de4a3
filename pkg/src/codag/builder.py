"""Condensed DAG construction: route tree, node partition, merge.

The route tree has one branch per simple origin-destination route, so an
original arc is replicated once for every route that uses it.  Tree nodes
are then grouped into cells and each cell collapses to one CoDAG node.

The default partition groups tree nodes that replicate the same original
node *and* admit exactly the same set of continuations to the destination.
Merging such nodes can neither drop nor invent a route, and every route of
the original network corresponds to exactly one CoDAG route.  A group is
split further (by depth, or by height) when its members share neither a
common depth nor a common height.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .dag import (
    DepthHeightTable,
    compute_depth_height,
    enumerate_routes,
    topological_node_order,
    topological_orders,
)
from .exceptions import IllegalPartitionError, NetworkSchemaError, NotADAGError
from .network import ArcCorrespondence, OriginalNetwork


@dataclass(frozen=True)
class RouteTree:
    """Tree ``G_T``: node 0 is the root (a replica of the origin).

    ``node_route[t]`` and ``node_position[t]`` locate tree node ``t`` on its
    branch; the root has route -1 and position 0.
    """

    network: OriginalNetwork
    routes: tuple[tuple[int, ...], ...]
    node_original: np.ndarray
    node_route: np.ndarray
    node_position: np.ndarray
    arc_tail: np.ndarray
    arc_head: np.ndarray
    arc_original: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_original)

    @property
    def n_arcs(self) -> int:
        return len(self.arc_original)

    @property
    def tails(self):
        return tuple(int(x) for x in self.arc_tail)

    @property
    def heads(self):
        return tuple(int(x) for x in self.arc_head)

    @cached_property
    def node_depth(self) -> np.ndarray:
        return self.node_position.copy()

    @cached_property
    def node_height(self) -> np.ndarray:
        lengths = np.array([len(r) for r in self.routes])
        h = np.empty(self.n_nodes, dtype=np.int64)
        h[0] = lengths.max()
        h[1:] = lengths[self.node_route[1:]] - self.node_position[1:]
        return h

    def prefix(self, t: int) -> tuple[int, ...]:
        if t == 0:
            return ()
        return self.routes[self.node_route[t]][: self.node_position[t]]


def expand_tree(net: OriginalNetwork, cap: int | None = None) -> RouteTree:
    routes = tuple(enumerate_routes(net, net.origin, net.destination, cap))
    node_original = [net.origin]
    node_route = [-1]
    node_position = [0]
    tails, heads, arc_orig = [], [], []
    for q, r in enumerate(routes):
        prev = 0
        for k, a in enumerate(r, start=1):
            t = len(node_original)
            node_original.append(net.heads[a])
            node_route.append(q)
            node_position.append(k)
            tails.append(prev)
            heads.append(t)
            arc_orig.append(a)
            prev = t
    arr = lambda x: np.asarray(x, dtype=np.int64)  # noqa: E731
    return RouteTree(net, routes, arr(node_original), arr(node_route), arr(node_position),
                     arr(tails), arr(heads), arr(arc_orig))


@dataclass(frozen=True)
class Partition:
    cells: tuple[tuple[int, ...], ...]

    def cell_of(self, n_nodes: int) -> np.ndarray:
        idx = np.full(n_nodes, -1, dtype=np.int64)
        for c, cell in enumerate(self.cells):
            for t in cell:
                if idx[t] != -1:
                    raise IllegalPartitionError(f"tree node {t} appears in two cells")
                idx[t] = c
        if np.any(idx < 0):
            raise IllegalPartitionError("partition does not cover every tree node")
        return idx


def _continuations(tree: RouteTree):
    """Map each distinct prefix to the frozenset of its suffixes."""
    cont = defaultdict(set)
    for r in tree.routes:
        for k in range(len(r) + 1):
            cont[r[:k]].add(r[k:])
    return {p: frozenset(s) for p, s in cont.items()}


SPLIT_MODES = ("depth", "height", "none")


def build_partition(tree: RouteTree, split_by: str = "depth") -> Partition:
    """Default partition of the tree nodes.

    Tree nodes are grouped when they replicate the same original node and
    every route can continue from them in exactly the same ways.  Merging
    such a group never adds or removes a route.  ``split_by`` ("depth" or
    "height") picks the attribute used to break up a group whose members
    share neither a depth nor a height; ``"none"`` keeps such groups whole,
    giving the smallest graph this grouping allows at the cost of cells
    with mixed depth and height.
    """
    if split_by not in SPLIT_MODES:
        raise ValueError(f"split_by must be one of {SPLIT_MODES}")
    cont = _continuations(tree)
    depth, height = tree.node_depth, tree.node_height

    groups = defaultdict(list)
    for t in range(tree.n_nodes):
        key = (int(tree.node_original[t]), cont[tree.prefix(t)])
        groups[key].append(t)

    cells = []
    for members in groups.values():
        d = {int(depth[t]) for t in members}
        h = {int(height[t]) for t in members}
        if len(d) == 1 or len(h) == 1 or split_by == "none":
            cells.append(tuple(members))
            continue
        attr = depth if split_by == "depth" else height
        sub = defaultdict(list)
        for t in members:
            sub[int(attr[t])].append(t)
        cells.extend(tuple(v) for _, v in sorted(sub.items()))
    cells.sort(key=lambda c: (int(depth[list(c)].min()), int(tree.node_original[c[0]]), c[0]))
    return Partition(tuple(cells))


def singleton_partition(tree: RouteTree) -> Partition:
    return Partition(tuple((t,) for t in range(tree.n_nodes)))


@dataclass
class PartitionCheck:
    same_original: bool
    same_height_or_depth: bool
    heights_separated: bool
    offending: list = field(default_factory=list)


def check_partition_conditions(tree: RouteTree, p: Partition) -> PartitionCheck:
    """Literal merge conditions on a partition, for reporting.

    ``heights_separated`` tests that no two cells have interleaving tree-node
    heights (one cell strictly above the other somewhere and strictly below
    somewhere else).  Branch-local tree heights make this fail for many
    route-preserving partitions, so :func:`merge` does not require it; the
    authoritative checks there are acyclicity and route preservation.
    """
    same_orig, same_hd = True, True
    offending = []
    ranges = []
    for c, cell in enumerate(p.cells):
        cell = np.asarray(cell)
        if len(set(tree.node_original[cell].tolist())) != 1:
            same_orig = False
            offending.append(("mixed-original", c))
        if len(set(tree.node_depth[cell].tolist())) > 1 and \
                len(set(tree.node_height[cell].tolist())) > 1:
            same_hd = False
            offending.append(("mixed-depth-and-height", c))
        hs = tree.node_height[cell]
        ranges.append((int(hs.min()), int(hs.max())))
    separated = True
    for x in range(len(ranges)):
        for y in range(x + 1, len(ranges)):
            (lx, ux), (ly, uy) = ranges[x], ranges[y]
            if uy > lx and ly < ux:
                separated = False
                offending.append(("interleaved-heights", x, y))
    return PartitionCheck(same_orig, same_hd, separated, offending)


def merge(tree: RouteTree, p: Partition) -> "CoDAG":
    net = tree.network
    cell = p.cell_of(tree.n_nodes)
    for c, members in enumerate(p.cells):
        if len({int(tree.node_original[t]) for t in members}) != 1:
            raise IllegalPartitionError(f"cell {c} mixes replicas of different nodes")

    arc_keys = {}
    for k in range(tree.n_arcs):
        key = (int(cell[tree.arc_tail[k]]), int(cell[tree.arc_head[k]]), int(tree.arc_original[k]))
        arc_keys.setdefault(key, len(arc_keys))
    keys = list(arc_keys)

    n_cells = len(p.cells)
    raw = _RawGraph(n_cells, tuple(k[0] for k in keys), tuple(k[1] for k in keys))
    try:
        topological_node_order(raw)
    except NotADAGError:
        raise IllegalPartitionError("merged graph has a cycle") from None

    origin = int(cell[0])
    dest_cells = {int(cell[t]) for t in range(tree.n_nodes)
                  if tree.node_original[t] == net.destination}
    if len(dest_cells) != 1:
        raise IllegalPartitionError("destination replicas must form a single cell")
    destination = dest_cells.pop()

    # relabel nodes and arcs by depth so ids read origin -> destination
    table = compute_depth_height(raw, origin, destination)
    node_orig = [int(tree.node_original[members[0]]) for members in p.cells]
    node_order = sorted(range(n_cells), key=lambda c: (table.node_depth[c], node_orig[c], c))
    new_node = {c: k for k, c in enumerate(node_order)}
    arc_order = sorted(range(len(keys)), key=lambda a: (
        table.arc_depth[a], new_node[keys[a][0]], keys[a][2], new_node[keys[a][1]]))
    return CoDAG(
        network=net,
        n_nodes=n_cells,
        tails=tuple(new_node[keys[a][0]] for a in arc_order),
        heads=tuple(new_node[keys[a][1]] for a in arc_order),
        arc_original=tuple(keys[a][2] for a in arc_order),
        node_original=tuple(node_orig[c] for c in node_order),
        origin=new_node[origin],
        destination=new_node[destination],
    )


@dataclass(frozen=True)
class _RawGraph:
    n_nodes: int
    tails: tuple
    heads: tuple


def build_codag(net: OriginalNetwork, cap: int | None = None, split_by: str = "depth") -> "CoDAG":
    tree = expand_tree(net, cap)
    return merge(tree, build_partition(tree, split_by))


@dataclass(frozen=True)
class CoDAG:
    """Acyclic replica graph of an original network.

    Construction validates acyclicity and route coverage and precomputes the
    level structure used by the latency-to-go and flow recursions.
    """

    network: OriginalNetwork
    n_nodes: int
    tails: tuple[int, ...]
    heads: tuple[int, ...]
    arc_original: tuple[int, ...]
    node_original: tuple[int, ...]
    origin: int
    destination: int

    def __post_init__(self):
        m = len(self.tails)
        if len(self.heads) != m or len(self.arc_original) != m:
            raise NetworkSchemaError("arc arrays differ in length")
        if len(self.node_original) != self.n_nodes:
            raise NetworkSchemaError("node correspondence has the wrong length")
        net = self.network
        for a in range(m):
            o_arc = self.arc_original[a]
            if not 0 <= o_arc < net.n_arcs:
                raise NetworkSchemaError(f"arc {a} maps to unknown original arc {o_arc}")
            if (self.node_original[self.tails[a]] != net.tails[o_arc]
                    or self.node_original[self.heads[a]] != net.heads[o_arc]):
                raise NetworkSchemaError(f"arc {a} endpoints disagree with original arc {o_arc}")
        if self.node_original[self.origin] != net.origin:
            raise NetworkSchemaError("CoDAG origin does not replicate the network origin")
        if self.node_original[self.destination] != net.destination:
            raise NetworkSchemaError("CoDAG destination does not replicate the network destination")
        # raises NotADAGError / CoverageError
        _ = self.table

    @property
    def n_arcs(self) -> int:
        return len(self.tails)

    @property
    def demand(self) -> float:
        return self.network.demand

    @cached_property
    def table(self) -> DepthHeightTable:
        return compute_depth_height(self, self.origin, self.destination)

    @cached_property
    def corr(self) -> ArcCorrespondence:
        return ArcCorrespondence(np.asarray(self.arc_original), self.network.n_arcs)

    @cached_property
    def tail_arr(self) -> np.ndarray:
        return np.asarray(self.tails, dtype=np.int64)

    @cached_property
    def head_arr(self) -> np.ndarray:
        return np.asarray(self.heads, dtype=np.int64)

    @cached_property
    def out_arcs(self) -> tuple[np.ndarray, ...]:
        out = [[] for _ in range(self.n_nodes)]
        for a, i in enumerate(self.tails):
            out[i].append(a)
        return tuple(np.asarray(x, dtype=np.int64) for x in out)

    @cached_property
    def in_arcs(self) -> tuple[np.ndarray, ...]:
        inc = [[] for _ in range(self.n_nodes)]
        for a, j in enumerate(self.heads):
            inc[j].append(a)
        return tuple(np.asarray(x, dtype=np.int64) for x in inc)

    @cached_property
    def choice_nodes(self) -> np.ndarray:
        """Nodes with outgoing arcs (every node but the destination)."""
        return np.array([i for i in range(self.n_nodes) if len(self.out_arcs[i])], dtype=np.int64)

    @cached_property
    def orders(self):
        return topological_orders(self, self.table)

    @cached_property
    def backward_plan(self):
        """Per height level: arcs of that height, then the nodes of that height
        with their out-arcs laid out as contiguous segments for ``reduceat``."""
        t = self.table
        plan = []
        for h in range(1, t.height + 1):
            arcs = np.flatnonzero(t.arc_height == h)
            nodes = np.flatnonzero(t.node_height == h)
            nodes = nodes[nodes != self.destination]
            seg = [self.out_arcs[i] for i in nodes]
            counts = np.array([len(x) for x in seg], dtype=np.int64)
            starts = np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.int64)
            flat = np.concatenate(seg) if seg else np.zeros(0, dtype=np.int64)
            plan.append((arcs, nodes, flat, starts, counts))
        return plan

    @cached_property
    def forward_plan(self):
        """Arc ids grouped by depth, shallowest first."""
        t = self.table
        return [np.flatnonzero(t.arc_depth == k) for k in range(1, t.depth + 1)]

    def routes(self, cap: int | None = None):
        return enumerate_routes(self, self.origin, self.destination, cap)

    def original_routes(self, cap: int | None = None):
        """CoDAG routes rewritten as original-arc sequences."""
        return [tuple(self.arc_original[a] for a in r) for r in self.routes(cap)]

    def correspondence_table(self) -> str:
        net = self.network
        lines = [f"{'original':<12} {'tail->head':<14} CoDAG arcs"]
        for o_arc in range(net.n_arcs):
            reps = self.corr.replicas[o_arc]
            ends = f"{net.node_labels[net.tails[o_arc]]}->{net.node_labels[net.heads[o_arc]]}"
            lines.append(f"{net.arc_labels[o_arc]:<12} {ends:<14} "
                         + (", ".join(f"c{a}" for a in reps) if reps else "-"))
        lines.append(f"{net.n_arcs} original arcs, {self.n_arcs} CoDAG arcs, "
                     f"{self.n_nodes} CoDAG nodes")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        net = self.network
        return {
            "nodes": [{"id": i, "original": net.node_labels[o]} for i, o in enumerate(self.node_original)],
            "arcs": [{"id": a, "tail": self.tails[a], "head": self.heads[a],
                      "original": net.arc_labels[self.arc_original[a]]} for a in range(self.n_arcs)],
            "origin": self.origin,
            "destination": self.destination,
            "network": net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoDAG":
        try:
            net = OriginalNetwork.from_dict(d["network"])
            node_idx = {lab: k for k, lab in enumerate(net.node_labels)}
            arc_idx = {lab: k for k, lab in enumerate(net.arc_labels)}
            nodes = sorted(d["nodes"], key=lambda x: int(x["id"]))
            if [int(x["id"]) for x in nodes] != list(range(len(nodes))):
                raise NetworkSchemaError("CoDAG node ids must be 0..n-1")
            arcs = sorted(d["arcs"], key=lambda x: int(x["id"]))
            if [int(x["id"]) for x in arcs] != list(range(len(arcs))):
                raise NetworkSchemaError("CoDAG arc ids must be 0..m-1")
            return cls(
                network=net,
                n_nodes=len(nodes),
                tails=tuple(int(x["tail"]) for x in arcs),
                heads=tuple(int(x["head"]) for x in arcs),
                arc_original=tuple(arc_idx[str(x["original"])] for x in arcs),
                node_original=tuple(node_idx[str(x["original"])] for x in nodes),
                origin=int(d["origin"]),
                destination=int(d["destination"]),
            )
        except KeyError as exc:
            raise NetworkSchemaError(f"missing or unknown identifier {exc}") from None


def load_codag(path) -> CoDAG:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise NetworkSchemaError(f"{path}: not valid JSON ({exc})") from None
    return CoDAG.from_dict(data)


def save_codag(g: CoDAG, path) -> None:
    Path(path).write_text(json.dumps(g.to_dict(), indent=2) + "\n")


@dataclass
class RoutePreservation:
    preserved: bool
    missing: list
    extra: list
    duplicated: list


def check_route_preservation(g: CoDAG, cap: int | None = None) -> RoutePreservation:
    """Compare CoDAG routes (mapped to original arcs) with the original routes."""
    net = g.network
    mapped = g.original_routes(cap)
    original = set(enumerate_routes(net, net.origin, net.destination, cap))
    seen, dup = set(), []
    for r in mapped:
        if r in seen:
            dup.append(r)
        seen.add(r)
    missing = sorted(original - seen)
    extra = sorted(seen - original)
    return RoutePreservation(not missing and not extra and not dup, missing, extra, dup)
