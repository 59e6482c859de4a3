"""
CoDAG equilibrium two ways
==========================

Logit route choice on the condensed DAG has one equilibrium flow.  It is the
fixed point of "compute latencies-to-go, split by softmax, push flow
forward", and it is also the minimizer of a strictly convex potential F.
Both computations should land on the same flows.
"""

import numpy as np

from codag import build_codag
from codag.equilibrium import kkt_check, original_flows, solve_convex, solve_fixed_point
from codag.fixtures import TABLE_BETA, figure1_network

g = build_codag(figure1_network())
beta = TABLE_BETA

fp = solve_fixed_point(g, beta)
fw = solve_convex(g, beta)
print(f"fixed point: {fp.iterations} iterations, F = {fp.F:.12f}")
print(f"convex:      {fw.info['fw_iterations']} Frank-Wolfe + {fw.info['newton_steps']} Newton steps, "
      f"F = {fw.F:.12f}")
print(f"largest flow difference: {np.abs(fp.w - fw.w).max():.2e}")

# steady-state flow per original arc (bar-chart data)
print()
print("arc   flow")
for label, x in zip(g.network.arc_labels, original_flows(g, fw.w)):
    print(f"{label:4s} {x:.6f}  " + "#" * int(round(60 * x)))

# every arc carries some traffic at equilibrium
assert original_flows(g, fw.w).min() > 0

# KKT: the node potentials are the multipliers of the conservation rows
rep = kkt_check(g, fw.w, beta)
print()
print(f"stationarity residual {rep.stationarity:.1e}, conservation {rep.conservation:.1e}")
print("potentials:", np.round(rep.multipliers, 6))

# %%
# As beta grows travellers become less noisy and the cheap arcs take over.

print()
print(" beta   " + " ".join(f"{lab:>6s}" for lab in g.network.arc_labels))
for b in (0.5, 2.0, 10.0, 50.0):
    W = original_flows(g, solve_convex(g, b).w)
    print(f"{b:5.1f}   " + " ".join(f"{x:6.3f}" for x in W))
