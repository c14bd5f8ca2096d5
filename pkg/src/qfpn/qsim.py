"""Dense statevector simulation of the re-uploading variational circuit.

Layout of one layer (repeated ``n_layers`` times)::

    R_Y(scale_l * x_i)  on every qubit   (every layer if ``reupload``, else layer 0 only)
    Rot(phi, theta, omega) on every qubit
    CNOT ring  0->1, 1->2, ..., (n-1)->0  applied in that order

followed by a Pauli-Z readout on each qubit.

Qubit 0 is the most significant bit of the basis-state index. All arithmetic
is complex128; nothing in this module is random.

Internally every routine works on a *batch* of states with shape
``(M, 2**n)`` so that the 2 * (#parameters) shifted circuits needed by the
parameter-shift rule run as one vectorized simulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

MIN_QUBITS = 2
MAX_QUBITS = 10
SHIFT = np.pi / 2


@dataclass(frozen=True)
class Statevector:
    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        if not MIN_QUBITS <= self.n_qubits <= MAX_QUBITS:
            raise ValueError(f"n_qubits must be in [{MIN_QUBITS}, {MAX_QUBITS}], got {self.n_qubits}")
        amps = np.asarray(self.amplitudes, dtype=np.complex128)
        if amps.shape != (2**self.n_qubits,):
            raise ValueError(f"expected {2**self.n_qubits} amplitudes, got shape {amps.shape}")
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def zero(cls, n_qubits: int) -> "Statevector":
        amps = np.zeros(2**n_qubits, dtype=np.complex128)
        amps[0] = 1.0
        return cls(n_qubits, amps)

    @classmethod
    def basis(cls, n_qubits: int, index: int) -> "Statevector":
        amps = np.zeros(2**n_qubits, dtype=np.complex128)
        amps[index] = 1.0
        return cls(n_qubits, amps)

    def norm(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2))


@dataclass
class CircuitParams:
    """Variational angles of one circuit plus its encoding configuration.

    ``angles[l, i]`` holds ``(phi, theta, omega)`` for qubit ``i`` in layer ``l``.
    ``encoding_scale[l]`` multiplies the encoded inputs in layer ``l``.
    """

    n_qubits: int
    n_layers: int
    angles: np.ndarray
    reupload: bool = True
    encoding_scale: np.ndarray = field(default=None)

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.angles.shape != (self.n_layers, self.n_qubits, 3):
            raise ValueError(
                f"angles must have shape ({self.n_layers}, {self.n_qubits}, 3), got {self.angles.shape}"
            )
        if not np.all(np.isfinite(self.angles)):
            raise ValueError("angles must be finite")
        if self.encoding_scale is None:
            self.encoding_scale = np.ones(self.n_layers)
        self.encoding_scale = np.asarray(self.encoding_scale, dtype=np.float64)
        if self.encoding_scale.shape != (self.n_layers,):
            raise ValueError("encoding_scale needs one entry per layer")

    @classmethod
    def zeros(cls, n_qubits: int, n_layers: int, **kwargs) -> "CircuitParams":
        return cls(n_qubits, n_layers, np.zeros((n_layers, n_qubits, 3)), **kwargs)

    @property
    def n_params(self) -> int:
        return 3 * self.n_qubits * self.n_layers

    @property
    def encoded_layers(self) -> int:
        return self.n_layers if self.reupload else 1


def frequency_scales(n_layers: int) -> np.ndarray:
    """Geometric encoding multipliers 1, 2, 4, ... for the frequency-scaled variant."""
    return 2.0 ** np.arange(n_layers)


# ---------------------------------------------------------------------------
# batched kernels: states have shape (M, 2**n)


def _check_qubit(n: int, qubit: int) -> None:
    if not 0 <= qubit < n:
        raise IndexError(f"qubit {qubit} out of range for {n} qubits")


def _apply_1q(states: np.ndarray, n: int, qubit: int, u: np.ndarray) -> np.ndarray:
    """Apply per-batch 2x2 matrices ``u`` of shape (M, 2, 2) to ``qubit``."""
    m = states.shape[0]
    s = states.reshape(m, 2**qubit, 2, 2 ** (n - qubit - 1))
    s0, s1 = s[:, :, 0, :], s[:, :, 1, :]
    u = u[:, :, :, None, None]
    out = np.empty_like(s)
    out[:, :, 0, :] = u[:, 0, 0] * s0 + u[:, 0, 1] * s1
    out[:, :, 1, :] = u[:, 1, 0] * s0 + u[:, 1, 1] * s1
    return out.reshape(m, -1)


def ry_matrices(angles: np.ndarray) -> np.ndarray:
    c, s = np.cos(angles / 2), np.sin(angles / 2)
    u = np.empty(angles.shape + (2, 2), dtype=np.complex128)
    u[..., 0, 0], u[..., 0, 1] = c, -s
    u[..., 1, 0], u[..., 1, 1] = s, c
    return u


def rot_matrices(phi: np.ndarray, theta: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Closed form of R_Z(omega) @ R_Y(theta) @ R_Z(phi)."""
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    u = np.empty(np.shape(theta) + (2, 2), dtype=np.complex128)
    u[..., 0, 0] = np.exp(-0.5j * (phi + omega)) * c
    u[..., 0, 1] = -np.exp(0.5j * (phi - omega)) * s
    u[..., 1, 0] = np.exp(-0.5j * (phi - omega)) * s
    u[..., 1, 1] = np.exp(0.5j * (phi + omega)) * c
    return u


@lru_cache(maxsize=None)
def _cnot_perm(n: int, control: int, target: int) -> np.ndarray:
    idx = np.arange(2**n)
    cbit = (idx >> (n - 1 - control)) & 1
    return idx ^ (cbit << (n - 1 - target))


@lru_cache(maxsize=None)
def _ring_perm(n: int) -> np.ndarray:
    # new_state = old_state[perm]; composing sequential gates composes gathers
    perm = np.arange(2**n)
    for i in range(n):
        perm = perm[_cnot_perm(n, i, (i + 1) % n)]
    return perm


def _expectations_z(states: np.ndarray, n: int) -> np.ndarray:
    probs = np.abs(states) ** 2
    out = np.empty((states.shape[0], n))
    for q in range(n):
        p = probs.reshape(-1, 2**q, 2, 2 ** (n - q - 1)).sum(axis=(1, 3))
        out[:, q] = p[:, 0] - p[:, 1]
    return out


def simulate(enc_angles: np.ndarray, var_angles: np.ndarray, reupload: bool) -> np.ndarray:
    """Run a batch of circuits and return Pauli-Z expectations.

    Args:
        enc_angles: (M, L, n) R_Y encoding angles, already scaled. Only layer 0
            is read when ``reupload`` is false.
        var_angles: (M, L, n, 3) variational angles.

    Returns:
        (M, n) array of expectation values.
    """
    m, n_layers, n = enc_angles.shape
    states = np.zeros((m, 2**n), dtype=np.complex128)
    states[:, 0] = 1.0
    enc_u = ry_matrices(enc_angles)
    rot_u = rot_matrices(var_angles[..., 0], var_angles[..., 1], var_angles[..., 2])
    ring = _ring_perm(n)
    for layer in range(n_layers):
        if reupload or layer == 0:
            for q in range(n):
                states = _apply_1q(states, n, q, enc_u[:, layer, q])
        for q in range(n):
            states = _apply_1q(states, n, q, rot_u[:, layer, q])
        states = states[:, ring]
    return _expectations_z(states, n)


# ---------------------------------------------------------------------------
# single-state gate API


def apply_ry(state: Statevector, qubit: int, angle: float) -> Statevector:
    _check_qubit(state.n_qubits, qubit)
    u = ry_matrices(np.array([float(angle)]))
    amps = _apply_1q(state.amplitudes[None, :], state.n_qubits, qubit, u)[0]
    return Statevector(state.n_qubits, amps)


def apply_rz(state: Statevector, qubit: int, angle: float) -> Statevector:
    _check_qubit(state.n_qubits, qubit)
    u = rot_matrices(np.array([0.0]), np.array([0.0]), np.array([float(angle)]))
    amps = _apply_1q(state.amplitudes[None, :], state.n_qubits, qubit, u)[0]
    return Statevector(state.n_qubits, amps)


def apply_rot(state: Statevector, qubit: int, phi: float, theta: float, omega: float) -> Statevector:
    """R_Z(phi), then R_Y(theta), then R_Z(omega) on one qubit."""
    _check_qubit(state.n_qubits, qubit)
    u = rot_matrices(np.array([float(phi)]), np.array([float(theta)]), np.array([float(omega)]))
    amps = _apply_1q(state.amplitudes[None, :], state.n_qubits, qubit, u)[0]
    return Statevector(state.n_qubits, amps)


def apply_cnot(state: Statevector, control: int, target: int) -> Statevector:
    n = state.n_qubits
    _check_qubit(n, control)
    _check_qubit(n, target)
    if control == target:
        raise ValueError("control and target must differ")
    return Statevector(n, state.amplitudes[_cnot_perm(n, control, target)])


def expectation_z(state: Statevector, qubit: int) -> float:
    _check_qubit(state.n_qubits, qubit)
    return float(_expectations_z(state.amplitudes[None, :], state.n_qubits)[0, qubit])


# ---------------------------------------------------------------------------
# circuit-level API


def _encoding_angles(x: np.ndarray, params: CircuitParams) -> np.ndarray:
    # (..., n) -> (..., L, n)
    return x[..., None, :] * params.encoding_scale[:, None]


def _check_inputs(x, params: CircuitParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.n_qubits:
        raise ValueError(f"input has {x.shape[-1]} features but the circuit has {params.n_qubits} qubits")
    if not np.all(np.isfinite(x)):
        raise ValueError("circuit inputs must be finite")
    return x


def run_circuit(x, params: CircuitParams) -> np.ndarray:
    """Pauli-Z expectations of the circuit for one input vector ``x``."""
    x = _check_inputs(x, params)
    if x.ndim != 1:
        raise ValueError("run_circuit expects a single input vector; use run_circuit_batch")
    return run_circuit_batch(x[None, :], params)[0]


def run_circuit_batch(xs, params: CircuitParams) -> np.ndarray:
    """Expectations for each row of ``xs`` (shape (B, n)) under shared angles."""
    xs = _check_inputs(xs, params)
    b = xs.shape[0]
    var = np.broadcast_to(params.angles, (b,) + params.angles.shape)
    return simulate(_encoding_angles(xs, params), var, params.reupload)


def circuit_gradients_batch(xs, params: CircuitParams, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Parameter-shift gradients for a batch of rows.

    Returns ``(d_angles, d_x)`` where ``d_angles`` (L, n, 3) is summed over the
    batch and ``d_x`` has shape (B, n). ``upstream`` (B, n) weights each
    expectation, so the results are vector-Jacobian products.
    """
    xs = _check_inputs(xs, params)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != xs.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match inputs {xs.shape}")
    b, n = xs.shape
    n_layers = params.n_layers
    n_var = params.n_params
    n_enc = params.encoded_layers * n
    n_shift = n_var + n_enc

    enc0 = _encoding_angles(xs, params)                               # (B, L, n)
    enc = np.repeat(enc0[:, None], 2 * n_shift, axis=1)               # (B, S, L, n)
    var = np.broadcast_to(params.angles, (b, 2 * n_shift) + params.angles.shape).copy()

    # rows 2k / 2k+1 hold the +shift / -shift copies of scalar parameter k
    signs = np.tile([SHIFT, -SHIFT], n_shift)
    k = np.repeat(np.arange(n_shift), 2)
    is_var = k < n_var
    vk = k[is_var]
    var[:, np.flatnonzero(is_var), vk // (3 * n), (vk // 3) % n, vk % 3] += signs[is_var]
    ek = k[~is_var] - n_var
    enc[:, np.flatnonzero(~is_var), ek // n, ek % n] += signs[~is_var]

    f = simulate(enc.reshape(-1, n_layers, n), var.reshape(-1, n_layers, n, 3), params.reupload)
    f = f.reshape(b, n_shift, 2, n)
    df = 0.5 * (f[:, :, 0] - f[:, :, 1])                              # (B, S, n)
    vjp = np.einsum("bsn,bn->bs", df, upstream)

    d_angles = vjp[:, :n_var].sum(axis=0).reshape(n_layers, n, 3)
    d_enc = vjp[:, n_var:].reshape(b, params.encoded_layers, n)
    d_x = np.einsum("bln,l->bn", d_enc, params.encoding_scale[: params.encoded_layers])
    return d_angles, d_x


def circuit_gradients(x, params: CircuitParams, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product of :func:`run_circuit` by the parameter-shift rule.

    Each rotation angle ``a`` enters as ``exp(-i a P / 2)`` for a Pauli ``P``, so
    ``d<Z>/da = (f(a + pi/2) - f(a - pi/2)) / 2``. The input ``x_i`` is treated
    as one angle per layer it is encoded in, scaled by that layer's multiplier.
    """
    x = _check_inputs(x, params)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.ndim != 1 or upstream.shape != x.shape:
        raise ValueError("x and upstream must both be vectors of length n_qubits")
    d_angles, d_x = circuit_gradients_batch(x[None], params, upstream[None])
    return d_angles, d_x[0]
