"""Watch the quantum FPN gate blend two feature maps.

Run: python demos/fpn_gate_blending.py
"""

import numpy as np

from qfpn import tensorgraph as tg
from qfpn.fusion import QuantumFpnGate, classical_fpn_merge, fpn_gate_forward

rng = np.random.default_rng(2)
channels = 3
gate = QuantumFpnGate.create("demo", channels, rng)

lateral = rng.normal(size=(1, channels, 4, 4))
top_down = rng.normal(size=(1, channels, 4, 4)) + 2.0
f_lat, f_td = tg.constant(lateral), tg.constant(top_down)

out = fpn_gate_forward(f_lat, f_td, gate).values
# Recover the per-channel weight: out = g * lat + (1 - g) * td.
g = ((out - top_down) / (lateral - top_down))[0, :, 0, 0]
print("per-channel gate at init:", np.round(g, 4))

# With the output layer zeroed the gate sits at 0.5: an average, half of plain addition.
gate.out_weight.node.values[:] = 0.0
avg = fpn_gate_forward(f_lat, f_td, gate).values
added = classical_fpn_merge(f_lat, f_td).values
print("zeroed output layer, out == (lat + td) / 2:", np.array_equal(avg, 0.5 * lateral + 0.5 * top_down))
print("ratio to classical addition:", float(np.mean(avg / added)))

# Gradients reach the circuit angles through the whole chain.
gate.out_weight.node.values[:] = rng.normal(size=gate.out_weight.values.shape)
loss = tg.total(tg.mul(fpn_gate_forward(f_lat, f_td, gate), tg.constant(rng.normal(size=lateral.shape))))
tg.backward(loss)
print("circuit gradient norm:", float(np.linalg.norm(gate.circuit.grad)))
