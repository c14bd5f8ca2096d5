"""Independent reference implementations used only by the tests.

None of these import the code paths they check: the circuit oracle builds
full 2^n x 2^n unitaries from matrix exponentials and Kronecker products,
the Lovasz oracle evaluates the Jaccard set function on Python sets, and the
precision oracle counts thresholds with plain loops.
"""

from functools import reduce

import numpy as np
from scipy.linalg import expm

X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
I2 = np.eye(2, dtype=complex)
P0 = np.array([[1, 0], [0, 0]], dtype=complex)
P1 = np.array([[0, 0], [0, 1]], dtype=complex)


def ry(a):
    return expm(-0.5j * a * Y)


def rz(a):
    return expm(-0.5j * a * Z)


def rot(phi, theta, omega):
    return rz(omega) @ ry(theta) @ rz(phi)


def embed(u, qubit, n):
    ops = [I2] * n
    ops[qubit] = u
    return reduce(np.kron, ops)


def cnot(control, target, n):
    a = [I2] * n
    a[control] = P0
    b = [I2] * n
    b[control] = P1
    b[target] = X
    return reduce(np.kron, a) + reduce(np.kron, b)


def circuit_unitary(x, angles, reupload=True, scales=None):
    n_layers, n, _ = angles.shape
    scales = np.ones(n_layers) if scales is None else scales
    u = np.eye(2**n, dtype=complex)
    for layer in range(n_layers):
        if reupload or layer == 0:
            for q in range(n):
                u = embed(ry(scales[layer] * x[q]), q, n) @ u
        for q in range(n):
            u = embed(rot(*angles[layer, q]), q, n) @ u
        for q in range(n):
            u = cnot(q, (q + 1) % n, n) @ u
    return u


def dense_expectations(x, angles, reupload=True, scales=None):
    n = angles.shape[1]
    psi = circuit_unitary(x, angles, reupload, scales)[:, 0]
    return np.array([np.real(psi.conj() @ embed(Z, q, n) @ psi) for q in range(n)])


def central_diff(f, x, step=1e-5):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2 * step)
    return g


def jaccard_set_loss(error_set, positives):
    """|A| / |positives U A| for a set A of mispredicted pixels."""
    if not error_set:
        return 0.0
    return len(error_set) / len(positives | error_set)


def lovasz_prefix_chain(logits, targets):
    """Lovasz extension of the Jaccard set loss evaluated on relu(hinge errors)."""
    z = np.ravel(logits).tolist()
    t = np.ravel(targets).tolist()
    positives = {i for i, v in enumerate(t) if v == 1}
    m = [max(1.0 - zi * (2 * ti - 1), 0.0) for zi, ti in zip(z, t)]
    order = sorted(range(len(m)), key=lambda i: -m[i])
    value, prefix, prev = 0.0, set(), 0.0
    for i in order:
        prefix = prefix | {i}
        cur = jaccard_set_loss(prefix, positives)
        value += m[i] * (cur - prev)
        prev = cur
    return value


def tgs_precision_loop(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    n_gt, n_pred = int(gt.sum()), int(pred.sum())
    if n_gt == 0:
        return 1.0 if n_pred == 0 else 0.0
    if n_pred == 0:
        return 0.0
    inter = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p and g)
    union = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p or g)
    # inter/union > (50 + 5k)/100, compared exactly in integers
    hits = sum(1 for k in range(10) if 100 * inter > (50 + 5 * k) * union)
    return hits / 10
