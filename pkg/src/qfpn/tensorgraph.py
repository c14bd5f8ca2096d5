"""Minimal eager reverse-mode autodiff over float64 numpy arrays.

Every op computes its value immediately and records a closure that pushes
the output adjoint back to its inputs. :func:`backward` walks the graph in
reverse topological order.

Broadcasting is deliberately narrow: ``add`` and ``mul`` accept operands of
equal shape, or a second operand whose shape matches the trailing axes of
the first (e.g. a per-feature vector against a ``[B, F]`` batch).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import qsim


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("values", "grad", "inputs", "op_tag", "requires_grad", "_backward")

    def __init__(self, values, inputs=(), op_tag="leaf", requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.inputs = tuple(inputs)
        self.op_tag = op_tag
        self.requires_grad = requires_grad or any(i.requires_grad for i in self.inputs)
        # intermediates get their buffer when backward() reaches them
        self.grad = np.zeros_like(self.values) if self.requires_grad and not self.inputs else None
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def _accumulate(self, g):
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.values)
            self.grad += g

    def __repr__(self):
        return f"Node(op={self.op_tag}, shape={self.shape})"


def constant(values) -> Node:
    return Node(values)


def leaf(values) -> Node:
    return Node(values, requires_grad=True)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(values, inputs, tag, backward) -> Node:
    out = Node(values, inputs, tag)
    if out.requires_grad:
        out._backward = backward
    return out


@dataclass
class Parameter:
    """A trainable leaf with a unique dotted name and an optimizer group."""

    name: str
    node: Node
    group: str = "decoder"
    decay: bool = True

    GROUPS = ("encoder", "decoder", "quantum")

    def __post_init__(self):
        if self.group not in self.GROUPS:
            raise ValueError(f"unknown parameter group {self.group!r}")
        if not self.node.requires_grad:
            raise ValueError("parameter nodes must require grad")

    @classmethod
    def create(cls, name, values, group="decoder", decay=True) -> "Parameter":
        return cls(name, leaf(np.array(values, dtype=np.float64)), group, decay)

    @property
    def values(self) -> np.ndarray:
        return self.node.values

    @property
    def grad(self) -> np.ndarray:
        return self.node.grad

    @property
    def size(self) -> int:
        return self.node.values.size


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in node.inputs:
            if id(child) not in seen and child.requires_grad:
                stack.append((child, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node."""
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if node.inputs:
            node.grad = np.zeros_like(node.values)
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _broadcastable(a: Node, b: Node, op: str):
    if a.shape == b.shape:
        return
    if len(b.shape) < len(a.shape) and a.shape[len(a.shape) - len(b.shape):] == b.shape:
        return
    raise ShapeError(f"{op}: cannot combine {a.op_tag}{a.shape} with {b.op_tag}{b.shape}")


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcastable(a, b, "add")

    def bw(g):
        a._accumulate(g)
        b._accumulate(_reduce_to(g, b.shape))

    return _make(a.values + b.values, (a, b), "add", bw)


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcastable(a, b, "mul")

    def bw(g):
        a._accumulate(g * b.values)
        b._accumulate(_reduce_to(g * a.values, b.shape))

    return _make(a.values * b.values, (a, b), "mul", bw)


def scalar_mul(a: Node, c: float) -> Node:
    return _make(a.values * c, (a,), "scalar_mul", lambda g: a._accumulate(g * c))


def add_scalar(a: Node, c: float) -> Node:
    return _make(a.values + c, (a,), "add_scalar", lambda g: a._accumulate(g))


def tanh(a: Node) -> Node:
    y = np.tanh(a.values)
    return _make(y, (a,), "tanh", lambda g: a._accumulate(g * (1.0 - y * y)))


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a: Node) -> Node:
    y = _sigmoid(a.values)
    return _make(y, (a,), "sigmoid", lambda g: a._accumulate(g * y * (1.0 - y)))


def relu(a: Node) -> Node:
    mask = a.values > 0
    return _make(a.values * mask, (a,), "relu", lambda g: a._accumulate(g * mask))


def total(a: Node) -> Node:
    """Sum of all entries as a scalar node (used by tests and loss assembly)."""
    return _make(np.array(a.values.sum()), (a,), "sum", lambda g: a._accumulate(np.full(a.shape, g)))


def concat(nodes, axis: int = 1) -> Node:
    nodes = [_as_node(n) for n in nodes]
    ref = nodes[0].shape
    for n in nodes[1:]:
        if len(n.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(n.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: {nodes[0].op_tag}{ref} vs {n.op_tag}{n.shape} along axis {axis}")
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def bw(g):
        for n, part in zip(nodes, np.split(g, sizes, axis=axis)):
            n._accumulate(part)

    return _make(np.concatenate([n.values for n in nodes], axis=axis), nodes, "concat", bw)


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """``x @ weight.T + bias`` for x of shape [B, F_in] and weight [F_out, F_in]."""
    if x.values.ndim != 2 or weight.values.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    y = x.values @ weight.values.T
    inputs = (x, weight)
    if bias is not None:
        y = y + bias.values
        inputs = (x, weight, bias)

    def bw(g):
        x._accumulate(g @ weight.values)
        weight._accumulate(g.T @ x.values)
        if bias is not None:
            bias._accumulate(g.sum(axis=0))

    return _make(y, inputs, "linear", bw)


def global_avg_pool(x: Node) -> Node:
    if x.values.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    return _make(
        x.values.mean(axis=(2, 3)),
        (x,),
        "gap",
        lambda g: x._accumulate(np.broadcast_to(g[:, :, None, None] / hw, x.shape)),
    )


def broadcast_channelwise(v: Node, height: int, width: int) -> Node:
    """Spread a [B, C] node over an H x W grid."""
    if v.values.ndim != 2:
        raise ShapeError(f"broadcast_channelwise expects [B,C], got {v.shape}")
    y = np.broadcast_to(v.values[:, :, None, None], v.shape + (height, width)).copy()
    return _make(y, (v,), "broadcast_channelwise", lambda g: v._accumulate(g.sum(axis=(2, 3))))


def upsample_nearest2x(x: Node) -> Node:
    y = x.values.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        b, c, h, w = x.shape
        x._accumulate(g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(y, (x,), "upsample2x", bw)


def maxpool2x(x: Node) -> Node:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x needs even spatial size, got {x.shape}")
    blocks = x.values.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        x._accumulate(gb)

    return _make(y, (x,), "maxpool2x", bw)


def hflip(x: Node) -> Node:
    return _make(x.values[..., ::-1].copy(), (x,), "hflip", lambda g: x._accumulate(g[..., ::-1]))


def conv2d(x: Node, weight: Node, bias: Node | None = None, stride: int = 1, padding: int = 0) -> Node:
    """2-D cross-correlation via im2col."""
    if x.values.ndim != 4 or weight.values.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: weight {weight.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
    span_h, span_w = h + 2 * padding - k, w + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(f"conv2d: non-integral output size for input {x.shape}, k={k}, stride={stride}, padding={padding}")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.values
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, cin * k * k)
    wmat = weight.values.reshape(cout, -1)
    y = cols @ wmat.T
    if bias is not None:
        y += bias.values
    y = y.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        weight._accumulate((gmat.T @ cols).reshape(weight.shape))
        if bias is not None:
            bias._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(b, ho, wo, cin, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            x._accumulate(dxp[:, :, padding : padding + h, padding : padding + w])

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(y), inputs, "conv2d", bw)


# ---------------------------------------------------------------------------
# bridge to the simulator


def quantum_node(x: Node, circuit: Parameter, reupload: bool = True, encoding_scale=None) -> Node:
    """Run the variational circuit on every row of ``x`` ([B, n]).

    ``circuit`` holds the (L, n, 3) angle array. Backward uses the
    parameter-shift rule for both the angles and the encoded inputs.
    """
    n_layers, n, _ = circuit.values.shape
    if x.values.ndim != 2 or x.shape[1] != n:
        raise ShapeError(f"quantum_node: input {x.shape} does not match a {n}-qubit circuit")

    def params():
        return qsim.CircuitParams(n, n_layers, circuit.values, reupload, encoding_scale)

    y = qsim.run_circuit_batch(x.values, params())

    def bw(g):
        d_angles, d_x = qsim.circuit_gradients_batch(x.values, params(), g)
        circuit.node._accumulate(d_angles)
        x._accumulate(d_x)

    return _make(y, (x, circuit.node), "quantum", bw)
