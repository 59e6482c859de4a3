"""
Learning the equilibrium
========================

Travellers at every node nudge their split ratios toward the logit response
to the latencies they just experienced, each node by a random step
eta ~ Uniform(1e-6, 0.1).  The flows settle on the equilibrium within a few
hundred rounds.  The continuous-time version of the same rule decreases the
potential F monotonically.

Pass a directory as the first argument to also write per-seed CSV files.
"""

import sys
from pathlib import Path

import numpy as np

from codag import build_codag
from codag.dynamics import (
    StepNoiseModel, convergence_metrics, entry_step, integrate_ode, simulate,
)
from codag.equilibrium import original_flows, solve_convex
from codag.fixtures import TABLE_BETA, figure1_network

g = build_codag(figure1_network())
eq = solve_convex(g, TABLE_BETA)
noise = StepNoiseModel.uniform(1e-6, 0.1)

runs = [simulate(g, TABLE_BETA, noise.with_seed(s), 400, eq=eq) for s in range(10)]
dist = np.mean([r.dist_sq for r in runs], axis=0)

print("step   mean ||xi - xi_eq||^2")
for n in (0, 10, 25, 50, 100, 150, 200, 300, 400):
    print(f"{n:4d}   {dist[n]:.3e}")
print("inside 1e-6 from step", entry_step(dist, 1e-6))

# flows of one run next to the equilibrium (plot data)
W = np.array([original_flows(g, w) for w in runs[0].w])
W_eq = original_flows(g, eq.w)
print()
print("arc   W[0]    W[50]   W[400]  equilibrium")
for k, lab in enumerate(g.network.arc_labels):
    print(f"{lab:4s} {W[0, k]:.4f}  {W[50, k]:.4f}  {W[400, k]:.4f}  {W_eq[k]:.4f}")

# the noise is multiplicative: at the equilibrium the drift and the noise
# vanish together, so long runs converge all the way
m = convergence_metrics(runs, eq)
print()
print(f"post burn-in mean squared distance {m.mean_sq_dist:.2e}")

# %%
# Mean ODE with fourth-order Runge-Kutta.

ode = integrate_ode(g, None, TABLE_BETA, T=30.0, h=0.05)
print()
print("   t        F(w(t))")
for t in (0, 1, 2, 5, 10, 30):
    k = int(round(t / 0.05))
    print(f"{t:4d}   {ode.F[k]:.10f}")
print(f"largest increase of F: {np.diff(ode.F).max():.1e}")

if len(sys.argv) > 1:
    out = Path(sys.argv[1])
    out.mkdir(parents=True, exist_ok=True)
    for r in runs:
        r.write_csv(out / f"seed_{r.seed}.csv")
    print("wrote", len(runs), "trajectories to", out)
