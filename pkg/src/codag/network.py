"""Original traffic network: latency functions, demand and arc correspondence.

Node and arc identifiers are dense integers starting at 0.  The JSON files
read by :func:`load_network` use string identifiers, which are densified in
file order; the original labels are kept on the network for reporting.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .exceptions import DomainError, NetworkSchemaError

LATENCY_KINDS = ("affine", "bpr")


@dataclass(frozen=True)
class LatencyFunction:
    """Latency ``s(x) = k0 + k1 * x**power`` on ``x >= 0``.

    ``kind="affine"`` fixes ``power = 1``.  ``kind="bpr"`` is the monomial
    BPR family with ``power >= 1``.  Both have closed-form primitives.
    """

    k0: float
    k1: float
    kind: str = "affine"
    power: float = 1.0

    def __post_init__(self):
        if self.kind not in LATENCY_KINDS:
            raise NetworkSchemaError(f"unknown latency kind {self.kind!r}")
        if self.kind == "affine" and self.power != 1.0:
            raise NetworkSchemaError("affine latency must have power 1")
        if self.kind == "bpr" and not self.power >= 1.0:
            raise NetworkSchemaError("bpr latency needs power >= 1")
        if not (np.isfinite(self.k0) and self.k0 >= 0):
            raise NetworkSchemaError(f"k0 must be finite and >= 0, got {self.k0}")
        if not (np.isfinite(self.k1) and self.k1 > 0):
            # k1 > 0 is what makes the latency strictly increasing
            raise NetworkSchemaError(f"k1 must be finite and > 0, got {self.k1}")

    def __call__(self, x):
        return evaluate_latency(self, x)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "k0": self.k0, "k1": self.k1}
        if self.kind == "bpr":
            d["power"] = self.power
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyFunction":
        kind = d.get("kind", "affine")
        try:
            return cls(k0=float(d["k0"]), k1=float(d["k1"]), kind=kind,
                       power=float(d.get("power", 1.0)))
        except KeyError as exc:
            raise NetworkSchemaError(f"latency is missing field {exc}") from None


def _check_flow(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise DomainError("latency functions are defined for nonnegative flow only")
    return x


def evaluate_latency(f: LatencyFunction, x):
    """Travel time ``s(x)``; works elementwise on arrays."""
    x = _check_flow(x)
    out = f.k0 + f.k1 * (x if f.power == 1.0 else x ** f.power)
    return float(out) if out.ndim == 0 else out


def latency_derivative(f: LatencyFunction, x):
    x = _check_flow(x)
    out = f.k1 * (np.ones_like(x) if f.power == 1.0 else f.power * x ** (f.power - 1.0))
    return float(out) if out.ndim == 0 else out


def latency_primitive(f: LatencyFunction, x):
    """Closed form of ``int_0^x s(u) du``."""
    x = _check_flow(x)
    p = f.power
    out = f.k0 * x + f.k1 * x ** (p + 1.0) / (p + 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class OriginalNetwork:
    """Directed network with one origin-destination pair.

    Parallel arcs are allowed; self loops are not.
    """

    n_nodes: int
    tails: tuple[int, ...]
    heads: tuple[int, ...]
    latencies: tuple[LatencyFunction, ...]
    origin: int
    destination: int
    demand: float
    node_labels: tuple[str, ...] = ()
    arc_labels: tuple[str, ...] = ()

    def __post_init__(self):
        n, m = self.n_nodes, len(self.tails)
        if len(self.heads) != m or len(self.latencies) != m:
            raise NetworkSchemaError("tails, heads and latencies must have equal length")
        if not self.node_labels:
            object.__setattr__(self, "node_labels", tuple(str(i) for i in range(n)))
        if not self.arc_labels:
            object.__setattr__(self, "arc_labels", tuple(str(a) for a in range(m)))
        if len(self.node_labels) != n or len(self.arc_labels) != m:
            raise NetworkSchemaError("label count does not match graph size")
        for a, (i, j) in enumerate(zip(self.tails, self.heads)):
            if not (0 <= i < n and 0 <= j < n):
                raise NetworkSchemaError(f"arc {a} references a missing node")
            if i == j:
                raise NetworkSchemaError(f"arc {a} is a self loop")
        if not (0 <= self.origin < n and 0 <= self.destination < n):
            raise NetworkSchemaError("origin/destination is not a node")
        if self.origin == self.destination:
            raise NetworkSchemaError("origin and destination must differ")
        if not (np.isfinite(self.demand) and self.demand > 0):
            raise NetworkSchemaError("demand must be positive")
        fwd = _reachable(n, self.tails, self.heads, self.origin)
        bwd = _reachable(n, self.heads, self.tails, self.destination)
        bad = [self.node_labels[i] for i in range(n) if not (fwd[i] and bwd[i])]
        if bad:
            raise NetworkSchemaError(
                f"nodes not on any origin-destination path: {', '.join(bad)}")

    @property
    def n_arcs(self) -> int:
        return len(self.tails)

    @cached_property
    def latency_params(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(k0, k1, power)`` arrays for vectorized evaluation."""
        return (np.array([f.k0 for f in self.latencies]),
                np.array([f.k1 for f in self.latencies]),
                np.array([f.power for f in self.latencies]))

    def latencies_at(self, W) -> np.ndarray:
        k0, k1, p = self.latency_params
        return k0 + k1 * _check_flow(W) ** p

    def latency_slopes_at(self, W) -> np.ndarray:
        k0, k1, p = self.latency_params
        return k1 * p * _check_flow(W) ** (p - 1.0)

    def primitives_at(self, W) -> np.ndarray:
        k0, k1, p = self.latency_params
        W = _check_flow(W)
        return k0 * W + k1 * W ** (p + 1.0) / (p + 1.0)

    def out_arcs(self, i: int) -> list[int]:
        return [a for a, t in enumerate(self.tails) if t == i]

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.node_labels),
            "arcs": [
                {"id": self.arc_labels[a],
                 "tail": self.node_labels[self.tails[a]],
                 "head": self.node_labels[self.heads[a]],
                 "latency": self.latencies[a].to_dict()}
                for a in range(self.n_arcs)
            ],
            "origin": self.node_labels[self.origin],
            "destination": self.node_labels[self.destination],
            "demand": self.demand,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OriginalNetwork":
        try:
            labels = [str(x) for x in d["nodes"]]
            index = {lab: k for k, lab in enumerate(labels)}
            if len(index) != len(labels):
                raise NetworkSchemaError("duplicate node ids")
            tails, heads, lats, arc_labels = [], [], [], []
            for k, arc in enumerate(d["arcs"]):
                arc_labels.append(str(arc.get("id", k)))
                tails.append(index[str(arc["tail"])])
                heads.append(index[str(arc["head"])])
                lats.append(LatencyFunction.from_dict(arc["latency"]))
            if len(set(arc_labels)) != len(arc_labels):
                raise NetworkSchemaError("duplicate arc ids")
            return cls(
                n_nodes=len(labels), tails=tuple(tails), heads=tuple(heads),
                latencies=tuple(lats), origin=index[str(d["origin"])],
                destination=index[str(d["destination"])], demand=float(d["demand"]),
                node_labels=tuple(labels), arc_labels=tuple(arc_labels),
            )
        except KeyError as exc:
            raise NetworkSchemaError(f"missing or unknown identifier {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, NetworkSchemaError):
                raise
            raise NetworkSchemaError(str(exc)) from None


def _reachable(n, tails, heads, start):
    adj = [[] for _ in range(n)]
    for i, j in zip(tails, heads):
        adj[i].append(j)
    seen = [False] * n
    seen[start] = True
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                queue.append(v)
    return seen


def load_network(path) -> OriginalNetwork:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise NetworkSchemaError(f"{path}: not valid JSON ({exc})") from None
    return OriginalNetwork.from_dict(data)


def save_network(net: OriginalNetwork, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class ArcCorrespondence:
    """Total map from CoDAG arc ids to original arc ids."""

    codag_to_original: np.ndarray
    n_original: int
    replicas: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        arr = np.asarray(self.codag_to_original, dtype=np.int64)
        if arr.ndim != 1 or np.any(arr < 0) or np.any(arr >= self.n_original):
            raise NetworkSchemaError("arc correspondence references unknown original arcs")
        arr.setflags(write=False)
        object.__setattr__(self, "codag_to_original", arr)
        reps = [[] for _ in range(self.n_original)]
        for a, orig in enumerate(arr):
            reps[orig].append(a)
        object.__setattr__(self, "replicas", tuple(tuple(r) for r in reps))

    def __getitem__(self, a: int) -> int:
        return int(self.codag_to_original[a])

    def __len__(self) -> int:
        return len(self.codag_to_original)

    def aggregate(self, w) -> np.ndarray:
        """Original-arc flows ``w_[a]`` for every original arc at once."""
        w = np.asarray(w, dtype=float)
        return np.bincount(self.codag_to_original, weights=w, minlength=self.n_original)


def aggregate_flow(corr: ArcCorrespondence, w, original_arc: int) -> float:
    """Total flow on ``original_arc``: the sum over its CoDAG replicas."""
    w = np.asarray(w, dtype=float)
    if w.shape != (len(corr),):
        raise DomainError(f"flow vector has shape {w.shape}, expected ({len(corr)},)")
    if not 0 <= original_arc < corr.n_original:
        raise KeyError(f"unknown original arc {original_arc}")
    return float(sum(w[a] for a in corr.replicas[original_arc]))
