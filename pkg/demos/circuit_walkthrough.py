"""Walk through the 4-qubit re-uploading circuit one gate family at a time.

Run: python demos/circuit_walkthrough.py
"""

import numpy as np

from qfpn import qsim
from qfpn.qsim import CircuitParams, Statevector

np.set_printoptions(precision=4, suppress=True)

# A fresh register reads +1 on every qubit.
state = Statevector.zero(4)
print("|0000> expectations:", [qsim.expectation_z(state, q) for q in range(4)])

# Encoding a single angle on qubit 0 tilts it away from the pole: <Z> = cos(x).
x = 0.8
tilted = qsim.apply_ry(state, 0, x)
print(f"R_Y({x}) on qubit 0 -> <Z_0> = {qsim.expectation_z(tilted, 0):.4f}, cos(x) = {np.cos(x):.4f}")

# The CNOT ring spreads that rotation to the neighbour.
entangled = qsim.apply_cnot(tilted, 0, 1)
print("after CNOT 0->1:", [round(qsim.expectation_z(entangled, q), 4) for q in range(4)])

# Full circuit: two layers, each re-encoding x before its Rot gates.
rng = np.random.default_rng(0)
params = CircuitParams(4, 2, rng.uniform(-0.1, 0.1, size=(2, 4, 3)))
inputs = np.array([0.3, -1.2, 2.0, 0.0])
print("small random angles:", qsim.run_circuit(inputs, params))

# Turning re-uploading off changes the function class, not just the value.
once = CircuitParams(4, 2, params.angles, reupload=False)
print("encoded once       :", qsim.run_circuit(inputs, once))

# Frequency scaling encodes layer l with 2**l * x.
freq = CircuitParams(4, 2, params.angles, encoding_scale=qsim.frequency_scales(2))
print("frequency scales   :", qsim.run_circuit(inputs, freq))
