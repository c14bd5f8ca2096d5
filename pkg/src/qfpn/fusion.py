"""Quantum gating at feature-fusion points.

Two topologies share the same circuit:

* ``QuantumFpnGate`` blends a lateral and a top-down feature map with a
  per-channel convex weight ``g`` computed from their pooled statistics.
* ``QuantumSkipGate`` rescales a single skip-connection feature map by ``g``.

``classical_fpn_merge`` is the parameter-free element-wise sum used as the
ablation counterpart of the FPN gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import qsim
from . import tensorgraph as tg
from .tensorgraph import Node, Parameter, ShapeError

ANGLE_INIT = 0.1


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _encoding_scale(kind: str, n_layers: int) -> np.ndarray:
    if kind == "unit":
        return np.ones(n_layers)
    if kind == "frequency":
        return qsim.frequency_scales(n_layers)
    raise ValueError(f"unknown encoding scale kind {kind!r}")


@dataclass
class QuantumFpnGate:
    compress: Parameter  # [n, 2C], no bias
    scale: Parameter     # [n]
    shift: Parameter     # [n]
    circuit: Parameter   # [L, n, 3]
    out_weight: Parameter  # [C, n]
    out_bias: Parameter    # [C]
    reupload: bool = True
    encoding_scale: np.ndarray | None = None

    @classmethod
    def create(cls, prefix: str, channels: int, rng, n_qubits=4, n_layers=2, reupload=True,
               encoding_scale_kind="unit") -> "QuantumFpnGate":
        return cls(
            compress=Parameter.create(f"{prefix}.compress.weight", _uniform(rng, (n_qubits, 2 * channels), 2 * channels)),
            scale=Parameter.create(f"{prefix}.scale", np.full(n_qubits, 0.5), decay=False),
            shift=Parameter.create(f"{prefix}.shift", np.zeros(n_qubits), decay=False),
            circuit=Parameter.create(
                f"{prefix}.circuit",
                rng.uniform(-ANGLE_INIT, ANGLE_INIT, size=(n_layers, n_qubits, 3)),
                group="quantum",
                decay=False,
            ),
            out_weight=Parameter.create(f"{prefix}.out.weight", _uniform(rng, (channels, n_qubits), n_qubits)),
            out_bias=Parameter.create(f"{prefix}.out.bias", np.zeros(channels)),
            reupload=reupload,
            encoding_scale=_encoding_scale(encoding_scale_kind, n_layers),
        )

    def parameters(self) -> list[Parameter]:
        return [self.compress, self.scale, self.shift, self.circuit, self.out_weight, self.out_bias]

    @property
    def channels(self) -> int:
        return self.out_bias.values.shape[0]

    def circuit_params(self) -> qsim.CircuitParams:
        n_layers, n, _ = self.circuit.values.shape
        return qsim.CircuitParams(n, n_layers, self.circuit.values, self.reupload, self.encoding_scale)


@dataclass
class QuantumSkipGate:
    proj: Parameter        # [n, C], no bias
    circuit: Parameter     # [L, n, 3]
    out_weight: Parameter  # [C, n]
    out_bias: Parameter    # [C]
    reupload: bool = True
    encoding_scale: np.ndarray | None = None

    @classmethod
    def create(cls, prefix: str, channels: int, rng, n_qubits=4, n_layers=2, reupload=True,
               encoding_scale_kind="unit") -> "QuantumSkipGate":
        return cls(
            proj=Parameter.create(f"{prefix}.proj.weight", _uniform(rng, (n_qubits, channels), channels)),
            circuit=Parameter.create(
                f"{prefix}.circuit",
                rng.uniform(-ANGLE_INIT, ANGLE_INIT, size=(n_layers, n_qubits, 3)),
                group="quantum",
                decay=False,
            ),
            out_weight=Parameter.create(f"{prefix}.out.weight", _uniform(rng, (channels, n_qubits), n_qubits)),
            out_bias=Parameter.create(f"{prefix}.out.bias", np.zeros(channels)),
            reupload=reupload,
            encoding_scale=_encoding_scale(encoding_scale_kind, n_layers),
        )

    def parameters(self) -> list[Parameter]:
        return [self.proj, self.circuit, self.out_weight, self.out_bias]

    @property
    def channels(self) -> int:
        return self.out_bias.values.shape[0]

    def circuit_params(self) -> qsim.CircuitParams:
        n_layers, n, _ = self.circuit.values.shape
        return qsim.CircuitParams(n, n_layers, self.circuit.values, self.reupload, self.encoding_scale)


def _channel_gate(q: Node, out_weight: Parameter, out_bias: Parameter, height: int, width: int) -> Node:
    g = tg.sigmoid(tg.linear(q, out_weight.node, out_bias.node))
    return tg.broadcast_channelwise(g, height, width)


def fpn_gate_forward(f_lat: Node, f_td: Node, gate: QuantumFpnGate) -> Node:
    """``g * F_lat + (1 - g) * F_td`` with ``g`` in (0, 1)^C from the circuit."""
    if f_lat.shape != f_td.shape:
        raise ShapeError(f"fpn gate: lateral {f_lat.shape} and top-down {f_td.shape} differ")
    _, c, h, w = f_lat.shape
    if c != gate.channels:
        raise ShapeError(f"fpn gate built for {gate.channels} channels, got {c}")
    pooled = tg.concat([tg.global_avg_pool(f_lat), tg.global_avg_pool(f_td)], axis=1)
    v = tg.linear(pooled, gate.compress.node)
    x = tg.scalar_mul(tg.add(tg.mul(tg.tanh(v), gate.scale.node), gate.shift.node), np.pi)
    q = tg.quantum_node(x, gate.circuit, gate.reupload, gate.encoding_scale)
    g = _channel_gate(q, gate.out_weight, gate.out_bias, h, w)
    one_minus_g = tg.add_scalar(tg.scalar_mul(g, -1.0), 1.0)
    return tg.add(tg.mul(g, f_lat), tg.mul(one_minus_g, f_td))


def classical_fpn_merge(f_lat: Node, f_td: Node) -> Node:
    if f_lat.shape != f_td.shape:
        raise ShapeError(f"fpn merge: lateral {f_lat.shape} and top-down {f_td.shape} differ")
    return tg.add(f_lat, f_td)


def skip_gate_forward(f_skip: Node, gate: QuantumSkipGate) -> Node:
    """Scale skip features channel-wise by a circuit-driven gate."""
    _, c, h, w = f_skip.shape
    if c != gate.proj.values.shape[1]:
        raise ShapeError(f"skip gate expects {gate.proj.values.shape[1]} channels, got {c}")
    x = tg.scalar_mul(tg.tanh(tg.linear(tg.global_avg_pool(f_skip), gate.proj.node)), np.pi)
    q = tg.quantum_node(x, gate.circuit, gate.reupload, gate.encoding_scale)
    return tg.mul(_channel_gate(q, gate.out_weight, gate.out_bias, h, w), f_skip)
