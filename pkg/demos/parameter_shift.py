"""Compare parameter-shift gradients with central differences.

Run: python demos/parameter_shift.py
"""

import numpy as np

from qfpn import qsim
from qfpn.qsim import CircuitParams

rng = np.random.default_rng(1)
params = CircuitParams(4, 2, rng.uniform(-np.pi, np.pi, size=(2, 4, 3)))
x = rng.uniform(-np.pi, np.pi, 4)
upstream = np.array([1.0, -0.5, 0.25, 2.0])

d_angles, d_x = qsim.circuit_gradients(x, params, upstream)


def objective(angles, inputs):
    return qsim.run_circuit(inputs, CircuitParams(4, 2, angles)) @ upstream


h = 1e-5
fd_angles = np.zeros_like(params.angles)
for idx in np.ndindex(params.angles.shape):
    step = np.zeros_like(params.angles)
    step[idx] = h
    fd_angles[idx] = (objective(params.angles + step, x) - objective(params.angles - step, x)) / (2 * h)
fd_x = np.array([(objective(params.angles, x + h * e) - objective(params.angles, x - h * e)) / (2 * h)
                 for e in np.eye(4)])

print("largest angle-gradient gap:", np.max(np.abs(d_angles - fd_angles)))
print("largest input-gradient gap:", np.max(np.abs(d_x - fd_x)))

# Barren-plateau reference: gradient variance over random initialisations.
samples = []
for _ in range(200):
    p = CircuitParams(4, 2, rng.uniform(-np.pi, np.pi, size=(2, 4, 3)))
    g, _ = qsim.circuit_gradients(rng.uniform(-np.pi, np.pi, 4), p, np.array([1.0, 0, 0, 0]))
    samples.append(g[0, 0, 1])
print(f"variance of d<Z_0>/d theta_00 over 200 draws: {np.var(samples):.4f} (2^-4 = {2**-4})")
