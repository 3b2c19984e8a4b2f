"""
An adaptive MoE layer over a changing capacity factor
=====================================================
"""

from dataclasses import replace

import numpy as np

from adamoe import Dims, Fixed, MoELayer, MoELayerConfig, RanksPerExpert, reference_forward

d = Dims(W=8, m=4, E=4, M=8, V=32, T=32, k=2, placement=RanksPerExpert(2))
layer = MoELayer(MoELayerConfig(d, Fixed(1.0)), seed=0)
x = np.random.default_rng(1).standard_normal((d.W, d.T, d.M))

for step, f in enumerate([1.0, 4.0] * 12):
    layer.config = replace(layer.config, capacity=Fixed(f))
    y, met = layer.forward(x)
    if step % 4 == 0 or step >= 20:
        print(f"step {step:2d} f={f:3.1f} cap={met.capacity:3d} {met.parallel.name} "
              f"{str(met.strategy):9s} {met.seconds * 1e6:8.2f} us")

# whatever was chosen, the output matches the dense single-process layer
want = reference_forward(x, layer, layer._saved["routing"])
print("max deviation from dense oracle:", float(np.abs(y - want).max()))

g = layer.backward(np.ones_like(x))
print("grad shapes:", g.dx.shape, g.w1.shape, g.w2.shape)
print(met.timeline.to_csv(step))
