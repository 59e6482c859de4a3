"""Perturbed best-response learning dynamics on a CoDAG.

At every step each node ``i`` moves its split ratios a random fraction
``eta_i * K_i`` of the way toward the logit response to the current
latencies-to-go:

    xi <- xi + eta_i K_i (softmax(-beta z(W)) - xi),   W = propagate(xi)

The update splits into the drift ``mu * rho(xi)`` plus the martingale
difference ``mu * M`` with ``M = (eta / mu - 1) rho``.  The mean ODE
``dxi/dt = rho(xi)`` is integrated with classical fourth-order Runge-Kutta.

Random step sizes come from counter-based Philox streams keyed by the seed:
the draw for node ``i`` at step ``n`` depends only on ``(seed, n, i)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .builder import CoDAG
from .equilibrium import (
    EquilibriumResult,
    choice_probabilities,
    latency_to_go,
    objective_F,
    propagate_flow,
    uniform_profile,
)
from .exceptions import ConfigurationError, DomainError, EstimationError

NOISE_KINDS = ("uniform", "degenerate")


@dataclass(frozen=True)
class StepNoiseModel:
    """Bounded i.i.d. step sizes ``eta_i[n]`` with mean ``mu``.

    ``uniform`` draws from ``[lower, upper]`` and has ``mu`` at the midpoint.
    ``degenerate`` always returns ``mu`` (``lower = upper = mu``); ``mu = 0``
    is accepted there as a boundary test mode.
    """

    lower: float
    upper: float
    kind: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigurationError(f"unknown noise kind {self.kind!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")
        if self.kind == "uniform":
            if not 0 < self.lower < self.upper:
                raise ConfigurationError(
                    f"uniform step sizes need 0 < lower < upper, got [{self.lower}, {self.upper}]")
        elif not (self.lower == self.upper and self.lower >= 0):
            raise ConfigurationError("degenerate step sizes need lower == upper >= 0")

    @classmethod
    def uniform(cls, lower: float, upper: float, seed: int = 0) -> "StepNoiseModel":
        return cls(float(lower), float(upper), "uniform", int(seed))

    @classmethod
    def degenerate(cls, mu: float, seed: int = 0) -> "StepNoiseModel":
        return cls(float(mu), float(mu), "degenerate", int(seed))

    @property
    def mean(self) -> float:
        return 0.5 * (self.lower + self.upper)

    def with_seed(self, seed: int) -> "StepNoiseModel":
        return StepNoiseModel(self.lower, self.upper, self.kind, int(seed))

    def scaled(self, factor: float) -> "StepNoiseModel":
        """Same shape with bounds (and hence mean) multiplied by ``factor``."""
        return StepNoiseModel(self.lower * factor, self.upper * factor, self.kind, self.seed)

    def draw(self, step: int, n: int) -> np.ndarray:
        if self.kind == "degenerate":
            return np.full(n, self.lower)
        bitgen = np.random.Philox(key=self.seed, counter=np.array([0, step, 0, 0], dtype=np.uint64))
        u = np.random.Generator(bitgen).random(n)
        return self.lower + (self.upper - self.lower) * u

    def check_rates(self, rates: np.ndarray) -> None:
        kmax = float(np.max(rates))
        if self.upper * kmax >= 1:
            raise ConfigurationError(
                f"step bound {self.upper} times rate {kmax} must stay below 1")


def rate_schedule(g: CoDAG, mode: str = "constant", base: float = 1.0,
                  ratio: float = 10.0) -> np.ndarray:
    """Per-node update rates ``K_i``.

    ``constant`` gives every node ``base``.  ``depth-scaled`` makes ``K_i``
    grow by ``ratio`` per level of node depth, with the deepest choice node
    at ``base``, so nodes nearer the destination adapt faster.
    """
    if not base > 0:
        raise ConfigurationError("base rate must be positive")
    if mode == "constant":
        return np.full(g.n_nodes, float(base))
    if mode == "depth-scaled":
        if not ratio > 1:
            raise ConfigurationError("depth-scaled rates need ratio > 1")
        depth = g.table.node_depth.astype(float)
        deepest = depth[g.choice_nodes].max()
        return base * ratio ** (depth - deepest)
    raise ConfigurationError(f"unknown rate mode {mode!r}")


def _response(g: CoDAG, xi, beta, g_o):
    w = propagate_flow(g, xi, g_o)
    return w, choice_probabilities(g, latency_to_go(g, w, beta), beta)


def rho(g: CoDAG, xi, beta: float, g_o=None, rates=None) -> np.ndarray:
    """Drift ``K_i (softmax - xi)``; zero exactly at the equilibrium profile."""
    xi = np.asarray(xi, dtype=float)
    K = np.ones(g.n_nodes) if rates is None else np.asarray(rates, dtype=float)
    _, target = _response(g, xi, beta, g_o)
    return K[g.tail_arr] * (target - xi)


def martingale_increment(g: CoDAG, xi, eta, mu: float, beta: float, g_o=None,
                         rates=None) -> np.ndarray:
    """``(eta_{i_a} / mu - 1) rho_a``: the zero-mean part of one update.

    ``eta`` may be one draw (per node) or a stack of draws, one per row.
    """
    if not mu > 0:
        raise ConfigurationError("mean step size must be positive")
    eta = np.asarray(eta, dtype=float)
    return (eta[..., g.tail_arr] / mu - 1.0) * rho(g, xi, beta, g_o, rates)


def pbr_step(g: CoDAG, xi, eta, rates, beta: float, g_o=None) -> np.ndarray:
    """One perturbed best-response update of the selection profile."""
    xi = np.asarray(xi, dtype=float)
    step = np.asarray(eta, dtype=float) * np.asarray(rates, dtype=float)
    if np.any(step[g.choice_nodes] >= 1) or np.any(step < 0):
        raise ConfigurationError("every step eta_i * K_i must lie in [0, 1)")
    _, target = _response(g, xi, beta, g_o)
    return xi + step[g.tail_arr] * (target - xi)


@dataclass
class TrajectoryRecord:
    """Samples ``n = 0..N`` of the discrete dynamics (row 0 is the start)."""

    xi: np.ndarray       # (N+1, m)
    w: np.ndarray        # (N+1, m)
    F: np.ndarray        # (N+1,)
    dist_sq: np.ndarray | None
    seed: int
    config: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.F) - 1

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def write_csv(self, path) -> None:
        m = self.xi.shape[1]
        header = (["step"] + [f"arc_{a}_w" for a in range(m)] + [f"arc_{a}_xi" for a in range(m)]
                  + ["F", "dist_sq"])
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(header)
            for n in range(len(self.F)):
                dist = "" if self.dist_sq is None else repr(float(self.dist_sq[n]))
                out.writerow([n] + [repr(float(x)) for x in self.w[n]]
                             + [repr(float(x)) for x in self.xi[n]] + [repr(float(self.F[n])), dist])


def simulate(g: CoDAG, beta: float, noise: StepNoiseModel, steps: int, rates=None,
             xi0=None, g_o=None, eq: EquilibriumResult | None = None) -> TrajectoryRecord:
    """Run ``steps`` updates from ``xi0`` (uniform choice by default)."""
    if steps < 0:
        raise ConfigurationError("steps must be nonnegative")
    K = rate_schedule(g) if rates is None else np.asarray(rates, dtype=float)
    if K.shape != (g.n_nodes,) or np.any(K <= 0):
        raise ConfigurationError("rates must be positive, one per CoDAG node")
    noise.check_rates(K[g.choice_nodes])
    g_o = g.demand if g_o is None else float(g_o)
    xi = uniform_profile(g) if xi0 is None else np.array(xi0, dtype=float)
    if xi.shape != (g.n_arcs,) or np.any(xi <= 0):
        raise ConfigurationError("initial profile must be strictly positive on every arc")
    sums = np.bincount(g.tail_arr, weights=xi, minlength=g.n_nodes)[g.choice_nodes]
    if np.max(np.abs(sums - 1)) > 1e-12:
        raise ConfigurationError("initial profile must sum to 1 at every node")

    xis = np.empty((steps + 1, g.n_arcs))
    ws = np.empty((steps + 1, g.n_arcs))
    Fs = np.empty(steps + 1)
    Kt = K[g.tail_arr]
    for n in range(steps + 1):
        w, target = _response(g, xi, beta, g_o)
        xis[n], ws[n], Fs[n] = xi, w, objective_F(g, w, beta)
        if n == steps:
            break
        eta = noise.draw(n, g.n_nodes)
        xi = xi + eta[g.tail_arr] * Kt * (target - xi)
    dist = None if eq is None else np.sum((xis - eq.xi) ** 2, axis=1)
    config = {"beta": beta, "demand": g_o, "steps": steps, "rates": K.tolist(),
              "noise": asdict(noise), "xi0": xis[0].tolist()}
    return TrajectoryRecord(xis, ws, Fs, dist, noise.seed, config)


@dataclass
class ODETrajectory:
    t: np.ndarray
    xi: np.ndarray
    w: np.ndarray
    F: np.ndarray


class StepRejected(ConfigurationError):
    """The objective rose between two ODE samples: the step is too coarse."""


def integrate_ode(g: CoDAG, xi0, beta: float, T: float, h: float, rates=None, g_o=None,
                  guard: float = 1e-9) -> ODETrajectory:
    """Fourth-order Runge-Kutta for ``dxi/dt = rho(xi)``.

    Flows are re-propagated at every stage.  Raises :class:`StepRejected`
    when ``F`` rises by more than ``guard`` between consecutive samples or a
    stage leaves the simplex.
    """
    if not (h > 0 and T >= 0):
        raise ConfigurationError("need h > 0 and T >= 0")
    K = rate_schedule(g) if rates is None else np.asarray(rates, dtype=float)
    g_o = g.demand if g_o is None else float(g_o)
    f = lambda x: rho(g, x, beta, g_o, K)  # noqa: E731
    n = int(round(T / h))
    xi = uniform_profile(g) if xi0 is None else np.array(xi0, dtype=float)
    xis = np.empty((n + 1, g.n_arcs))
    ws = np.empty((n + 1, g.n_arcs))
    Fs = np.empty(n + 1)
    for k in range(n + 1):
        w = propagate_flow(g, xi, g_o)
        xis[k], ws[k], Fs[k] = xi, w, objective_F(g, w, beta)
        if k and Fs[k] > Fs[k - 1] + guard:
            raise StepRejected(f"F increased by {Fs[k] - Fs[k - 1]:.3e} at t={k * h:g}; reduce h")
        if k == n:
            break
        try:
            k1 = f(xi)
            k2 = f(xi + 0.5 * h * k1)
            k3 = f(xi + 0.5 * h * k2)
            k4 = f(xi + h * k3)
        except DomainError:
            raise StepRejected(f"a stage left the probability simplex at t={k * h:g}; "
                               "reduce h") from None
        xi = xi + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return ODETrajectory(h * np.arange(n + 1), xis, ws, Fs)


@dataclass
class ConvergenceMetrics:
    """Post-burn-in summaries of ``||xi[n] - xi_eq||^2`` across seeds."""

    mean_sq_dist: float
    stderr: float
    per_seed: np.ndarray
    limsup: float
    burn_in: int
    samples: np.ndarray  # pooled post-burn-in distances

    def tail_prob(self, delta: float) -> float:
        return float(np.mean(self.samples >= delta))

    def to_dict(self, deltas=()) -> dict:
        return {"mean_sq_dist": self.mean_sq_dist, "stderr": self.stderr,
                "per_seed": self.per_seed.tolist(), "limsup_estimate": self.limsup,
                "burn_in": self.burn_in, "n_seeds": len(self.per_seed),
                "tail_prob": {repr(float(d)): self.tail_prob(d) for d in deltas}}


def convergence_metrics(trajs, eq: EquilibriumResult, burn_in: int | None = None,
                        window: int | None = None) -> ConvergenceMetrics:
    """Time averages after ``burn_in`` (half the horizon by default).

    ``limsup`` is the running maximum, after burn-in, of the seed-averaged
    distance smoothed over ``window`` steps (a tenth of the horizon).
    """
    if isinstance(trajs, TrajectoryRecord):
        trajs = [trajs]
    if not trajs:
        raise EstimationError("no trajectories")
    steps = min(t.steps for t in trajs)
    burn_in = steps // 2 if burn_in is None else int(burn_in)
    if steps <= burn_in:
        raise EstimationError(f"horizon {steps} does not exceed burn-in {burn_in}")
    d = np.array([np.sum((t.xi[burn_in:steps + 1] - eq.xi) ** 2, axis=1) for t in trajs])
    per_seed = d.mean(axis=1)
    stderr = float(per_seed.std(ddof=1) / np.sqrt(len(per_seed))) if len(per_seed) > 1 else float("nan")
    window = max(1, (steps // 10) if window is None else int(window))
    pooled = d.mean(axis=0)
    smooth = np.convolve(pooled, np.ones(window) / window, mode="valid") if len(pooled) >= window else pooled
    return ConvergenceMetrics(float(per_seed.mean()), stderr, per_seed, float(smooth.max()),
                              burn_in, d.ravel())


def entry_step(dist_sq: np.ndarray, level: float) -> int | None:
    """First step after which the series stays at or below ``level``."""
    above = np.flatnonzero(dist_sq > level)
    if len(above) == 0:
        return 0
    last = int(above[-1]) + 1
    return last if last < len(dist_sq) else None


def write_summary(path, metrics: ConvergenceMetrics, config: dict, deltas=()) -> None:
    Path(path).write_text(json.dumps({"config": config, "metrics": metrics.to_dict(deltas)},
                                     indent=2, sort_keys=True) + "\n")
