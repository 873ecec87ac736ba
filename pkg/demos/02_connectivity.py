"""Edge counts and maximum backpropagation distance of block wiring schemes."""

import math

from rdunet.connectivity import (analysis_rows, backprop_distance, build_graph, log_dense_bound, rows_to_table,
                                 shortcut_gain)

# layer i of a log-dense block reads i - 1, i - 2, i - 4, ...
g = build_graph(6, "log-dense")
for i in range(1, 7):
    print(f"layer {i} reads {g.reads(i)}")
print("BD(6, 0) =", backprop_distance(g, 6, 0))

print()
print(rows_to_table(analysis_rows(["log-dense", "full-dense", "chain", "residual-chain"], [6, 16, 64, 256])))

# log-dense stays close to full connectivity in distance at a fraction of the edges
for L in (16, 64, 256):
    print(f"L={L:4d}: edge bound L + L log2 L = {log_dense_bound(L):8.1f}, "
          f"MBD bound 1 + ceil(log2 L) = {1 + math.ceil(math.log2(L))}")

# scaled shortcuts multiply the direct gradient term by lambda^(L - l)
print()
for lam in (0.9, 1.0, 1.1):
    print(f"lambda = {lam}: gain over 30 units = {shortcut_gain(lam, 0, 30):.5f}")
