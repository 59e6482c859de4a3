"""Logit latency-to-go recursion, the equilibrium map and the convex objective F.

Flow vectors ``w`` and selection profiles ``xi`` are plain float arrays
indexed by CoDAG arc id.  ``xi[a]`` is the probability that a traveller at
the tail of ``a`` takes ``a``; the entries on each node's out-arcs sum to 1.

Two solvers compute the equilibrium independently:

* :func:`solve_fixed_point` iterates the damped map ``w <- (1-t) w + t T(w)``;
* :func:`solve_convex` minimizes ``F`` with pairwise Frank-Wolfe steps over
  the route vertices of the flow polytope and finishes with equality
  constrained Newton steps.

Their agreement is the numerical certificate that the fixed point of the
map and the minimizer of ``F`` coincide.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import xlogy

from .builder import CoDAG
from .exceptions import DomainError, NetworkSchemaError


@dataclass(frozen=True)
class LatencyToGo:
    z: np.ndarray    # per arc
    phi: np.ndarray  # per node, 0 at the destination


def _demand(g: CoDAG, g_o):
    return g.demand if g_o is None else float(g_o)


def _check_beta(beta):
    if not (np.isfinite(beta) and beta > 0):
        raise DomainError(f"beta must be positive, got {beta}")


def _as_flow(g: CoDAG, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (g.n_arcs,):
        raise DomainError(f"flow vector has shape {w.shape}, expected ({g.n_arcs},)")
    if np.any(np.isnan(w)) or np.any(w < 0):
        raise DomainError("flows must be nonnegative")
    return w


def original_flows(g: CoDAG, w) -> np.ndarray:
    return g.corr.aggregate(w)


def arc_latencies(g: CoDAG, w) -> np.ndarray:
    """``s_[a](w_[a])`` for every CoDAG arc."""
    return g.network.latencies_at(original_flows(g, w))[g.corr.codag_to_original]


def latency_to_go(g: CoDAG, w, beta: float) -> LatencyToGo:
    """Expected latency-to-go ``z`` and node potentials ``phi``, leaves first."""
    _check_beta(beta)
    w = _as_flow(g, w)
    return _latency_to_go_from_costs(g, arc_latencies(g, w), beta)


def _latency_to_go_from_costs(g: CoDAG, s: np.ndarray, beta: float) -> LatencyToGo:
    z = np.empty(g.n_arcs)
    phi = np.zeros(g.n_nodes)
    heads = g.head_arr
    for arcs, nodes, seg, starts, counts in g.backward_plan:
        z[arcs] = s[arcs] + phi[heads[arcs]]
        if len(nodes) == 0:
            continue
        v = -beta * z[seg]
        top = np.maximum.reduceat(v, starts)
        tot = np.add.reduceat(np.exp(v - np.repeat(top, counts)), starts)
        phi[nodes] = -(top + np.log(tot)) / beta
    return LatencyToGo(z, phi)


def choice_probabilities(g: CoDAG, ltg: LatencyToGo, beta: float) -> np.ndarray:
    """Logit arc-choice probabilities; ``z_a >= phi_i`` keeps the exponent <= 0."""
    _check_beta(beta)
    xi = np.exp(-beta * (ltg.z - ltg.phi[g.tail_arr]))
    return xi / np.bincount(g.tail_arr, weights=xi, minlength=g.n_nodes)[g.tail_arr]


def uniform_profile(g: CoDAG) -> np.ndarray:
    outdeg = np.bincount(g.tail_arr, minlength=g.n_nodes)
    return 1.0 / outdeg[g.tail_arr]


def profile_from_flow(g: CoDAG, w) -> np.ndarray:
    """Split ratios ``w_a / sum of w over the tail's out-arcs``."""
    w = _as_flow(g, w)
    S = node_outflow(g, w)[g.tail_arr]
    if np.any(S <= 0):
        raise DomainError("a node carries no flow, its split ratios are undefined")
    return w / S


def propagate_flow(g: CoDAG, xi, g_o=None) -> np.ndarray:
    """Arc flows induced by selection profile ``xi``, shallowest arcs first."""
    xi = np.asarray(xi, dtype=float)
    w = np.empty(g.n_arcs)
    inflow = np.zeros(g.n_nodes)
    inflow[g.origin] = _demand(g, g_o)
    tails, heads = g.tail_arr, g.head_arr
    for arcs in g.forward_plan:
        w[arcs] = inflow[tails[arcs]] * xi[arcs]
        np.add.at(inflow, heads[arcs], w[arcs])
    return w


def fixed_point_map(g: CoDAG, w, beta: float, g_o=None) -> np.ndarray:
    """``T(w)``: latency-to-go, then logit choices, then propagated flow."""
    ltg = latency_to_go(g, w, beta)
    return propagate_flow(g, choice_probabilities(g, ltg, beta), _demand(g, g_o))


def node_outflow(g: CoDAG, w) -> np.ndarray:
    return np.bincount(g.tail_arr, weights=w, minlength=g.n_nodes)


def node_inflow(g: CoDAG, w) -> np.ndarray:
    return np.bincount(g.head_arr, weights=w, minlength=g.n_nodes)


def conservation_violation(g: CoDAG, w, g_o=None) -> float:
    """Largest violation of flow conservation and of the demand constraint."""
    w = np.asarray(w, dtype=float)
    supply = np.zeros(g.n_nodes)
    supply[g.origin] = _demand(g, g_o)
    supply[g.destination] = -_demand(g, g_o)
    return float(np.max(np.abs(supply + node_inflow(g, w) - node_outflow(g, w))))


def entropy_terms(g: CoDAG, w) -> np.ndarray:
    """Per-node ``chi_i = sum w ln w - S ln S`` with ``0 ln 0 = 0``."""
    w = _as_flow(g, w)
    return (np.bincount(g.tail_arr, weights=xlogy(w, w), minlength=g.n_nodes)
            - xlogy(node_outflow(g, w), node_outflow(g, w)))


def objective_F(g: CoDAG, w, beta: float) -> float:
    _check_beta(beta)
    w = _as_flow(g, w)
    W = original_flows(g, w)
    prim = g.network.primitives_at(W).sum()
    return float(prim + entropy_terms(g, w).sum() / beta)


def gradient_F(g: CoDAG, w, beta: float) -> np.ndarray:
    _check_beta(beta)
    w = _as_flow(g, w)
    if np.any(w <= 0):
        raise DomainError("gradient of F is unbounded at a zero flow")
    S = node_outflow(g, w)[g.tail_arr]
    return arc_latencies(g, w) + np.log(w / S) / beta


def hessian_F(g: CoDAG, w, beta: float) -> np.ndarray:
    """Dense Hessian of F at a strictly positive ``w``."""
    w = _as_flow(g, w)
    if np.any(w <= 0):
        raise DomainError("Hessian of F is unbounded at a zero flow")
    W = original_flows(g, w)
    ds = g.network.latency_slopes_at(W)
    orig = g.corr.codag_to_original
    same_orig = orig[:, None] == orig[None, :]
    same_tail = g.tail_arr[:, None] == g.tail_arr[None, :]
    S = node_outflow(g, w)[g.tail_arr]
    return (same_orig * ds[orig][:, None]
            + (np.diag(1.0 / w) - same_tail / S[:, None]) / beta)


def conservation_matrix(g: CoDAG) -> tuple[np.ndarray, np.ndarray]:
    """``(A, b)`` with ``A w = b`` the conservation and demand rows for nodes != d."""
    rows = [i for i in range(g.n_nodes) if i != g.destination]
    A = np.zeros((len(rows), g.n_arcs))
    for r, i in enumerate(rows):
        A[r, g.out_arcs[i]] += 1.0
        A[r, g.in_arcs[i]] -= 1.0
    b = np.zeros(len(rows))
    b[rows.index(g.origin)] = g.demand
    return A, b


def tangent_basis(g: CoDAG) -> np.ndarray:
    """Orthonormal basis (columns) of the tangent space of the flow polytope."""
    from scipy.linalg import null_space
    A, _ = conservation_matrix(g)
    return null_space(A)


@dataclass
class KKTReport:
    passed: bool
    stationarity: float
    conservation: float
    nonnegativity: float
    multipliers: np.ndarray
    residuals: np.ndarray

    def to_dict(self) -> dict:
        return {"passed": self.passed, "stationarity": self.stationarity,
                "conservation": self.conservation, "nonnegativity": self.nonnegativity,
                "multipliers": self.multipliers.tolist()}


def kkt_check(g: CoDAG, w, beta: float, tol: float = 1e-7, g_o=None) -> KKTReport:
    """Stationarity with multipliers ``mu_i = phi_i(z(w))`` plus feasibility."""
    w = np.asarray(w, dtype=float)
    neg = float(max(0.0, -w.min(initial=0.0)))
    if neg > 0 or np.any(w == 0):
        res = np.full(g.n_arcs, np.inf)
        return KKTReport(False, float("inf"), conservation_violation(g, w, g_o), neg,
                         np.full(g.n_nodes, np.nan), res)
    mu = latency_to_go(g, w, beta).phi
    res = gradient_F(g, w, beta) + mu[g.head_arr] - mu[g.tail_arr]
    stat = float(np.max(np.abs(res)))
    cons = conservation_violation(g, w, g_o)
    return KKTReport(stat <= tol and cons <= tol, stat, cons, neg, mu, res)


@dataclass
class EquilibriumResult:
    w: np.ndarray
    xi: np.ndarray
    F: float
    kkt_residual: float
    fixed_point_residual: float
    iterations: int
    converged: bool
    method: str
    beta: float
    demand: float
    gap: float | None = None
    info: dict = field(default_factory=dict)

    def to_dict(self, g: CoDAG | None = None) -> dict:
        d = {
            "method": self.method,
            "converged": self.converged,
            "beta": self.beta,
            "demand": self.demand,
            "F": self.F,
            "kkt_residual": self.kkt_residual,
            "fixed_point_residual": self.fixed_point_residual,
            "duality_gap": self.gap,
            "iterations": self.iterations,
            "flows": {str(a): float(x) for a, x in enumerate(self.w)},
            "xi": {str(a): float(x) for a, x in enumerate(self.xi)},
        }
        if g is not None:
            W = original_flows(g, self.w)
            d["original_flows"] = {g.network.arc_labels[k]: float(x) for k, x in enumerate(W)}
        d.update(self.info)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EquilibriumResult":
        try:
            m = len(d["flows"])
            w = np.array([float(d["flows"][str(a)]) for a in range(m)])
            xi = (np.array([float(d["xi"][str(a)]) for a in range(m)])
                  if "xi" in d else np.full(m, np.nan))
            return cls(w=w, xi=xi, F=float(d.get("F", np.nan)),
                       kkt_residual=float(d.get("kkt_residual", np.nan)),
                       fixed_point_residual=float(d.get("fixed_point_residual", np.nan)),
                       iterations=int(d.get("iterations", 0)), converged=bool(d.get("converged", False)),
                       method=str(d.get("method", "unknown")), beta=float(d["beta"]),
                       demand=float(d["demand"]), gap=d.get("duality_gap"))
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkSchemaError(f"malformed equilibrium record: {exc}") from None


def save_result(res: EquilibriumResult, path, g: CoDAG | None = None) -> None:
    Path(path).write_text(json.dumps(res.to_dict(g), indent=2) + "\n")


def load_result(path) -> EquilibriumResult:
    with open(path) as fh:
        try:
            return EquilibriumResult.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise NetworkSchemaError(f"{path}: not valid JSON ({exc})") from None


def _finish(g, w, beta, g_o, method, iterations, converged, gap=None, info=None):
    Tw = fixed_point_map(g, w, beta, g_o)
    return EquilibriumResult(
        w=w, xi=profile_from_flow(g, w), F=objective_F(g, w, beta),
        kkt_residual=kkt_check(g, w, beta, g_o=g_o).stationarity,
        fixed_point_residual=float(np.max(np.abs(Tw - w))),
        iterations=iterations, converged=converged, method=method, beta=float(beta),
        demand=_demand(g, g_o), gap=gap, info=info or {})


def solve_fixed_point(g: CoDAG, beta: float, g_o=None, damping: float = 0.5,
                      tol: float = 1e-10, max_iter: int = 100_000,
                      patience: int = 20) -> EquilibriumResult:
    """Damped iteration of the equilibrium map from the uniform-choice flow.

    The damping factor is halved whenever the residual grows or the best
    residual so far stops improving for ``patience`` iterations.  This keeps
    the iteration contracting at large ``beta``, where the undamped map
    overshoots or settles into a two-cycle.
    """
    _check_beta(beta)
    if not 0 < damping <= 1:
        raise DomainError("damping must lie in (0, 1]")
    if not tol > 0:
        raise DomainError("tol must be positive")
    g_o = _demand(g, g_o)
    w = propagate_flow(g, uniform_profile(g), g_o)
    theta = damping
    best_w, best_res = w, np.inf
    prev, stall = np.inf, 0
    for it in range(1, max_iter + 1):
        Tw = fixed_point_map(g, w, beta, g_o)
        res = float(np.max(np.abs(Tw - w)))
        if res <= tol:
            # T(w) carries small relative error even on nearly empty arcs
            return _finish(g, Tw, beta, g_o, "fixed-point", it, True, info={"damping": theta})
        if res < best_res:
            best_w, best_res, stall = Tw, res, 0
        else:
            stall += 1
        if (res > prev or stall >= patience) and theta > 1e-6:
            theta *= 0.5
            stall = 0
        prev = res
        w = (1 - theta) * w + theta * Tw
    return _finish(g, best_w, beta, g_o, "fixed-point", max_iter, False, info={"damping": theta})


def shortest_route(g: CoDAG, cost) -> tuple[float, tuple[int, ...]]:
    """Cheapest origin-destination route under arc costs, by depth order."""
    dist = np.full(g.n_nodes, np.inf)
    dist[g.origin] = 0.0
    pred = np.full(g.n_nodes, -1, dtype=np.int64)
    tails, heads = g.tail_arr, g.head_arr
    for arcs in g.forward_plan:
        for a in arcs:
            cand = dist[tails[a]] + cost[a]
            if cand < dist[heads[a]]:
                dist[heads[a]] = cand
                pred[heads[a]] = a
    route = []
    node = g.destination
    while node != g.origin:
        a = int(pred[node])
        route.append(a)
        node = int(tails[a])
    return float(dist[g.destination]), tuple(reversed(route))


def _directional_derivative(g, w, d, beta, at_boundary=False):
    """``<grad F(w), d>``, with the limit taken for arcs that hit zero."""
    S = node_outflow(g, w)[g.tail_arr]
    with np.errstate(divide="ignore", invalid="ignore"):
        if at_boundary:
            Sd = node_outflow(g, d)[g.tail_arr]
            ratio = np.where(S > 0, w / S, d / Sd)
        else:
            ratio = w / S
        terms = d * (arc_latencies(g, w) + np.log(ratio) / beta)
    return float(np.sum(np.where(d == 0, 0.0, terms)))


class _PairwiseStep:
    """Moves route weight from ``v`` to ``s``.

    A step is described either by the amount moved, ``("gamma", x)``, or by
    the weight left on ``v``, ``("rho", x)``; whichever is small is the one
    resolved to full relative precision.  Flows are rebuilt from the route
    weights at every evaluation, so arcs used only by near-empty routes keep
    full relative precision too.
    """

    def __init__(self, g, lam, R, s, v, beta, g_o):
        self.g, self.lam, self.R, self.s, self.v = g, lam, R, s, v
        self.beta, self.g_o = beta, g_o
        self.d = g_o * (R[s] - R[v])

    def weights(self, step):
        kind, x = step
        lam = self.lam.copy()
        top = self.lam[self.v]
        moved, left = (x, top - x) if kind == "gamma" else (top - x, x)
        lam[self.s] += moved
        lam[self.v] = left
        return lam

    def slope(self, step):
        w = self.g_o * (self.weights(step) @ self.R)
        return _directional_derivative(self.g, w, self.d, self.beta,
                                       at_boundary=step == ("rho", 0.0))

    def solve(self):
        top = self.lam[self.v]
        end = self.slope(("rho", 0.0))
        if np.isfinite(end) and end <= 0:
            return ("rho", 0.0)
        half = 0.5 * top
        kw = dict(xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
        if self.slope(("gamma", half)) > 0:
            return ("gamma", brentq(lambda x: self.slope(("gamma", x)), 0.0, half, **kw))
        # the root is close to emptying v: solve in log(rho)
        f = lambda u: self.slope(("rho", float(np.exp(u))))  # noqa: E731
        lo = np.log(half)
        while lo > -700:
            lo -= 30.0
            val = f(max(lo, -700.0))
            if not np.isfinite(val) or val > 0:
                break
        lo = max(lo, -700.0)
        while not np.isfinite(f(lo)):
            lo += 1.0
        if f(lo) <= 0:
            return ("rho", float(np.exp(lo)))
        return ("rho", float(np.exp(brentq(f, lo, np.log(half), **kw))))


def route_costs(R, c) -> np.ndarray:
    return R @ c


def _newton_polish(g, w, beta, max_steps=100):
    """Equality-constrained Newton steps on F in relative form.

    The step is ``dx = w * y``.  Each arc row then carries O(1/beta)
    curvature on its diagonal and each conservation row is rescaled to unit
    size, so arcs and routes carrying vanishingly small flow keep full
    relative precision.  A fraction-to-boundary rule lets a flow shrink by
    up to 20x per step.
    """
    A, _ = conservation_matrix(g)
    k = A.shape[0]
    F = objective_F(g, w, beta)
    steps, last = 0, np.inf
    for steps in range(1, max_steps + 1):
        grad = gradient_F(g, w, beta)
        Aw = A * w[None, :]
        Aw /= np.max(np.abs(Aw), axis=1, keepdims=True)
        K = np.block([[hessian_F(g, w, beta) * w[None, :], A.T], [Aw, np.zeros((k, k))]])
        try:
            y = np.linalg.solve(K, np.concatenate([-grad, np.zeros(k)]))[: g.n_arcs]
        except np.linalg.LinAlgError:
            break
        size = float(np.max(np.abs(y)))
        # stop at rounding level, or once small steps stop shrinking
        if size <= 1e-15 or (size < 1e-9 and size >= 0.5 * last):
            break
        last = size
        dx = w * y
        decrement = float(-grad @ dx)
        t = min(1.0, 0.95 / max(-y.min(), 1e-300))
        while t > 1e-12:
            cand = w + t * dx
            # near the optimum F differences fall below rounding; trust Newton
            if np.all(cand > 0) and (
                    decrement < 1e-10 or objective_F(g, cand, beta) <= F - 0.25 * t * decrement):
                break
            t *= 0.5
        else:
            break
        w, F = cand, objective_F(g, cand, beta)
    return w, steps


def solve_convex(g: CoDAG, beta: float, g_o=None, tol: float = 1e-8, spread_tol: float = 1e-10,
                 max_iter: int = 100_000, polish: bool = True, polish_gap: float = 1e-3,
                 route_cap: int | None = None) -> EquilibriumResult:
    """Minimize F over the flow polytope.

    The flow is kept as a convex combination of route vertices ``g_o * 1_r``
    starting from the uniform-choice flow.  Each pairwise Frank-Wolfe step
    finds the cheapest route under the gradient costs (a shortest-path pass
    over the DAG, which is the linear minimization over the polytope), takes
    the most expensive route still carrying weight, and moves weight between
    the two with an exact line search.  The entropy terms stop the line
    search short of emptying an arc no other route covers, so iterates stay
    strictly positive.  The away route is the one contributing most to the
    gap, ``argmax lam_r (c_r - c_min)``, rather than the costliest: with
    entropy terms a near-empty route is never dropped and would otherwise be
    picked over and over.

    With ``polish`` the Frank-Wolfe phase stops at gap ``max(tol,
    polish_gap)`` and relative-form Newton steps finish the job; pairwise
    steps alone converge linearly but slowly on badly conditioned instances.

    Success means the duality gap ``<grad F(w), w - v>`` is at most ``tol``
    and the spread of gradient route costs over weighted routes is at most
    ``spread_tol``.  The spread bounds the gap and controls the stationarity
    residual on nearly empty routes, which the gap cannot see.
    """
    _check_beta(beta)
    if not (tol > 0 and spread_tol > 0):
        raise DomainError("tolerances must be positive")
    g_o = _demand(g, g_o)
    routes = g.routes(route_cap)
    index = {r: k for k, r in enumerate(routes)}
    R = np.zeros((len(routes), g.n_arcs))
    for k, r in enumerate(routes):
        R[k, list(r)] = 1.0
    xi0 = uniform_profile(g)
    lam = np.array([np.prod(xi0[list(r)]) for r in routes])
    w = g_o * (lam @ R)

    def certificate(w, weighted):
        c = gradient_F(g, w, beta)
        best, s_route = shortest_route(g, c)
        costs = route_costs(R[weighted], c)
        return float(c @ w - g_o * best), float(costs.max() - best), s_route, costs

    gap_target = max(tol, polish_gap) if polish else tol
    spread_target = np.inf if polish else spread_tol
    it = 0
    for it in range(1, max_iter + 1):
        active = np.flatnonzero(lam > 0)
        gap, spread, s_route, costs = certificate(w, active)
        if gap <= gap_target and spread <= spread_target:
            break
        # away route: largest share of the gap, so tiny weights cannot stall progress
        s = index[s_route]
        v = int(active[np.argmax(lam[active] * (costs - costs.min()))])
        if v == s:
            break
        step = _PairwiseStep(g, lam, R, s, v, beta, g_o)
        lam = step.weights(step.solve())
        w = g_o * (lam @ R)
    info = {"fw_iterations": it, "active_routes": int(np.sum(lam > 0)), "routes": len(routes)}
    if polish:
        w, info["newton_steps"] = _newton_polish(g, w, beta)
        gap, spread, _, _ = certificate(w, np.arange(len(routes)))
    else:
        gap, spread, _, _ = certificate(w, np.flatnonzero(lam > 0))
    info["route_cost_spread"] = spread
    converged = gap <= tol and spread <= spread_tol
    return _finish(g, w, beta, g_o, "frank-wolfe", it, converged, gap=gap, info=info)
