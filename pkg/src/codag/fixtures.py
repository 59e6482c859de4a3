"""Bundled networks and small-instance generators used by tests and demos."""

from __future__ import annotations

from importlib import resources

import numpy as np

from .network import LatencyFunction, OriginalNetwork, load_network

# Five-node network with a two-way link between nodes 2 and 3 and two
# parallel arcs from 4 to 5; the latency coefficients are the simulation table.
FIGURE1_ARCS = (
    ("a1", "1", "2"), ("a2", "1", "3"), ("a3", "3", "2"), ("a4", "2", "3"),
    ("a5", "3", "4"), ("a6", "2", "4"), ("a7", "3", "5"), ("a8", "4", "5"),
    ("a9", "4", "5"),
)
TABLE_K0 = (0, 1, 0, 1, 1, 0, 1, 1, 1)
TABLE_K1 = (2, 1, 1, 1, 1, 1, 2, 2, 2)
TABLE_BETA = 10.0
TABLE_DEMAND = 1.0


def data_path(name: str):
    return resources.files("codag") / "data" / name


def figure1_network() -> OriginalNetwork:
    return load_network(data_path("figure1.json"))


def figure1_dict() -> dict:
    return {
        "nodes": ["1", "2", "3", "4", "5"],
        "arcs": [{"id": a, "tail": t, "head": h,
                  "latency": {"kind": "affine", "k0": float(k0), "k1": float(k1)}}
                 for (a, t, h), k0, k1 in zip(FIGURE1_ARCS, TABLE_K0, TABLE_K1)],
        "origin": "1",
        "destination": "5",
        "demand": TABLE_DEMAND,
    }


def _affine(k0=0.0, k1=1.0):
    return LatencyFunction(float(k0), float(k1))


def parallel_links(k0=(0.0, 0.0), k1=(1.0, 1.0), demand=1.0) -> OriginalNetwork:
    m = len(k0)
    return OriginalNetwork(2, (0,) * m, (1,) * m, tuple(_affine(a, b) for a, b in zip(k0, k1)),
                           0, 1, demand)


def chain(k0=(1.0, 2.0), k1=(1.0, 1.0), demand=1.0) -> OriginalNetwork:
    m = len(k0)
    return OriginalNetwork(m + 1, tuple(range(m)), tuple(range(1, m + 1)),
                           tuple(_affine(a, b) for a, b in zip(k0, k1)), 0, m, demand)


def doubled_chain(n: int, demand=1.0) -> OriginalNetwork:
    """Chain of ``n`` nodes with two parallel arcs between neighbours."""
    if n < 2:
        raise ValueError("doubled chain needs at least 2 nodes")
    tails, heads = [], []
    for i in range(n - 1):
        tails += [i, i]
        heads += [i + 1, i + 1]
    lats = tuple(_affine(1.0, 1.0 + (a % 2)) for a in range(len(tails)))
    return OriginalNetwork(n, tuple(tails), tuple(heads), lats, 0, n - 1, demand)


def random_network(rng: np.random.Generator, max_nodes=8, max_arcs=16, max_routes=200,
                   acyclic=False, demand=1.0) -> OriginalNetwork:
    """Random connected network; cyclic unless ``acyclic``.

    Built by rejection: random arcs are drawn until every node lies on an
    origin-destination path and the route count is within ``max_routes``.
    """
    from .dag import enumerate_routes
    from .exceptions import EnumerationLimitError, NetworkSchemaError

    while True:
        n = int(rng.integers(2, max_nodes + 1))
        m = int(rng.integers(n - 1, max_arcs + 1))
        # a spine 0 -> 1 -> ... -> n-1 guarantees connectivity
        perm = [0] + list(rng.permutation(np.arange(1, n - 1)) if n > 2 else []) + [n - 1]
        tails = [int(perm[k]) for k in range(n - 1)]
        heads = [int(perm[k + 1]) for k in range(n - 1)]
        while len(tails) < m:
            i, j = (int(x) for x in rng.integers(0, n, size=2))
            if i == j or j == 0 or i == n - 1:
                continue
            if acyclic and perm.index(i) > perm.index(j):
                i, j = j, i
            tails.append(i)
            heads.append(j)
        lats = tuple(_affine(round(float(rng.uniform(0, 2)), 3), round(float(rng.uniform(0.2, 2)), 3))
                     for _ in tails)
        try:
            net = OriginalNetwork(n, tuple(tails), tuple(heads), lats, 0, n - 1, demand)
            enumerate_routes(net, 0, n - 1, cap=max_routes)
        except (NetworkSchemaError, EnumerationLimitError):
            continue
        return net
