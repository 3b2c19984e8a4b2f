"""
Linear vs hierarchical all-to-all
=================================

Same permutation, fewer and larger inter-node messages.
"""

import numpy as np

from adamoe.collectives import all2all_2dh, all2all_linear, linear_time, two_dh_time
from adamoe.fabric import CostModelParams, Topology, run_ranks

params = CostModelParams()
topo = Topology(16, 4)      # 4 nodes of 4 ranks

inputs = [np.arange(16 * 2.0) + 100 * r for r in range(16)]
lin = run_ranks(lambda ctx: all2all_linear(ctx, inputs[ctx.rank]), topo, params)
hier = run_ranks(lambda ctx: all2all_2dh(ctx, inputs[ctx.rank]), topo, params)
assert all(a.tobytes() == b.tobytes() for a, b in zip(lin.results, hier.results))
print("rank 5 receives:", lin.results[5][:6], "...")
print(f"simulated: linear {lin.clock.makespan * 1e6:.1f} us, 2DH {hier.clock.makespan * 1e6:.1f} us")

# closed forms at 1 MiB per rank, 8 ranks per node
print("\n   W  linear/2DH")
for W in (8, 64, 256, 1024, 2048):
    t = Topology(W, 8)
    print(f"{W:5d}  {linear_time(1 << 20, t, params) / two_dh_time(1 << 20, t, params):6.2f}")
