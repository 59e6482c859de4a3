"""
Building a condensed DAG
========================

The five-node example network has a two-way link between nodes 2 and 3, so
it is not acyclic.  We expand it into a tree of routes, merge equivalent tree
nodes, and check that nothing was lost on the way.
"""

import numpy as np

from codag import build_codag, expand_tree
from codag.builder import check_route_preservation
from codag.dag import verify_structure
from codag.fixtures import doubled_chain, figure1_network

net = figure1_network()
print(f"original: {net.n_nodes} nodes, {net.n_arcs} arcs")

# one branch per simple route
tree = expand_tree(net)
print(f"tree: {len(tree.routes)} routes, {tree.n_arcs} arcs")

# merge and list which CoDAG arcs replicate which original arc
g = build_codag(net)
print()
print(g.correspondence_table())

# depth and height of every CoDAG arc, in arc order
t = g.table
print()
print("arc    depth  height")
for a in range(g.n_arcs):
    print(f"c{a:<5} {t.arc_depth[a]:>5} {t.arc_height[a]:>7}")

# every CoDAG route maps onto exactly one original simple route
rp = check_route_preservation(g)
print()
print("routes preserved:", rp.preserved)
print("structure clauses hold:", verify_structure(g, t, g.origin, g.destination).passed)

# %%
# Doubled chains: the route tree grows exponentially, the CoDAG does not.

print()
print(" n   routes  tree arcs  CoDAG arcs")
for n in range(3, 11):
    dc = doubled_chain(n)
    print(f"{n:2d} {2 ** (n - 1):8d} {expand_tree(dc).n_arcs:10d} {build_codag(dc).n_arcs:11d}")

# the CoDAG of an acyclic network is the network itself
assert np.array_equal(sorted(build_codag(doubled_chain(6)).arc_original), range(10))
