"""Toy encoder-decoder segmentation models with pluggable fusion.

``fpn``: four conv+pool encoder stages, 1x1 laterals to a shared pyramid
width, a top-down path with three merge points (quantum gate or addition),
a 3x3 smoothing conv per merged level and a 1-channel head upsampled to
the input size.

``unet_skip``: mirrored decoder with concatenation skips; each skip may pass
through a quantum skip gate first (``merge_kind="quantum"``) or go straight
through (``"identity"``, the plain baseline).

Parameters are initialized from a generator seeded by ``(seed, name)`` so two
models that share a parameter name start from identical values no matter
which other parameters exist. This is what makes the quantum/classical
ablation pair comparable.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorgraph as tg
from .fusion import QuantumFpnGate, QuantumSkipGate, classical_fpn_merge, fpn_gate_forward, skip_gate_forward
from .tensorgraph import Node, Parameter, ShapeError

TOPOLOGIES = ("unet_skip", "fpn")
MERGE_KINDS = ("quantum", "classical", "identity")
N_STAGES = 4


@dataclass
class ModelConfig:
    topology: str = "fpn"
    merge_kind: str = "quantum"
    encoder_widths: list = field(default_factory=lambda: [8, 16, 32, 64])
    input_channels: int = 5
    resolution: int = 32
    qubits: int = 4
    layers: int = 2
    reupload: bool = True
    encoding_scale_kind: str = "unit"
    skip_placement: str = "all_levels"
    seed: int = 0

    def __post_init__(self):
        self.encoder_widths = [int(w) for w in self.encoder_widths]
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        if self.merge_kind not in MERGE_KINDS:
            raise ValueError(f"merge_kind must be one of {MERGE_KINDS}, got {self.merge_kind!r}")
        if self.topology == "fpn" and self.merge_kind == "identity":
            raise ValueError("fpn merges need 'quantum' or 'classical'; 'identity' is the unet_skip baseline")
        if len(self.encoder_widths) != N_STAGES or min(self.encoder_widths) < 1:
            raise ValueError(f"encoder_widths needs {N_STAGES} positive entries, got {self.encoder_widths}")
        if self.resolution < 2**N_STAGES or self.resolution % 2**N_STAGES:
            raise ValueError(f"resolution must be a positive multiple of {2**N_STAGES}, got {self.resolution}")
        if self.qubits not in (4, 6):
            raise ValueError(f"qubits must be 4 or 6, got {self.qubits}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.encoding_scale_kind not in ("unit", "frequency"):
            raise ValueError(f"unknown encoding_scale_kind {self.encoding_scale_kind!r}")
        if self.skip_placement not in ("all_levels", "bottleneck_only"):
            raise ValueError(f"unknown skip_placement {self.skip_placement!r}")

    @property
    def quantum(self) -> bool:
        return self.merge_kind == "quantum"

    def to_dict(self) -> dict:
        return asdict(self)


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class SegModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.gates: dict = {}

    # -- construction helpers

    def _add(self, p: Parameter) -> Parameter:
        if p.name in self.params:
            raise ValueError(f"duplicate parameter name {p.name}")
        self.params[p.name] = p
        return p

    def _conv(self, name: str, cin: int, cout: int, k: int, group: str):
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        w = _param_rng(self.config.seed, name + ".weight").uniform(-bound, bound, size=(cout, cin, k, k))
        self._add(Parameter.create(name + ".weight", w, group))
        self._add(Parameter.create(name + ".bias", np.zeros(cout), group))

    def _gate(self, prefix: str, cls, channels: int):
        cfg = self.config
        gate = cls.create(prefix, channels, _param_rng(cfg.seed, prefix), cfg.qubits, cfg.layers,
                          cfg.reupload, cfg.encoding_scale_kind)
        for p in gate.parameters():
            self._add(p)
        self.gates[prefix] = gate

    def apply_conv(self, name: str, x: Node, padding: int) -> Node:
        return tg.conv2d(x, self.params[name + ".weight"].node, self.params[name + ".bias"].node, 1, padding)

    # -- introspection

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.node.zero_grad()

    def n_quantum_params(self) -> int:
        return sum(p.size for p in self.params.values() if p.group == "quantum")

    def n_gate_scale_shift(self) -> int:
        return sum(p.size for n, p in self.params.items() if n.endswith((".scale", ".shift")))

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def summary(self) -> dict:
        return {
            "n_params": self.n_params(),
            "n_quantum_params": self.n_quantum_params(),
            "n_gate_scale_shift": self.n_gate_scale_shift(),
            "parameters": [
                {"name": p.name, "shape": list(p.values.shape), "group": p.group} for p in self.params.values()
            ],
        }


def build_model(config: ModelConfig) -> SegModel:
    model = SegModel(config)
    widths = config.encoder_widths
    cin = config.input_channels
    for k, w in enumerate(widths):
        model._conv(f"enc{k}.conv", cin, w, 3, "encoder")
        cin = w

    if config.topology == "fpn":
        pyramid = widths[1]
        for k, w in enumerate(widths):
            model._conv(f"fpn.lat{k}", w, pyramid, 1, "decoder")
        for k in range(N_STAGES - 1):
            if config.quantum:
                model._gate(f"fpn.gate{k}", QuantumFpnGate, pyramid)
            model._conv(f"fpn.smooth{k}", pyramid, pyramid, 3, "decoder")
        model._conv("head", pyramid, 1, 3, "decoder")
    else:
        model._conv("bottleneck.conv", widths[-1], widths[-1], 3, "decoder")
        prev = widths[-1]
        for k in reversed(range(N_STAGES)):
            gated = config.quantum and (config.skip_placement == "all_levels" or k == N_STAGES - 1)
            if gated:
                model._gate(f"unet.gate{k}", QuantumSkipGate, widths[k])
            model._conv(f"dec{k}.conv", prev + widths[k], widths[k], 3, "decoder")
            prev = widths[k]
        model._conv("head", widths[0], 1, 1, "decoder")
    return model


def _encoder(model: SegModel, x: Node):
    skips, pooled = [], []
    for k in range(N_STAGES):
        s = tg.relu(model.apply_conv(f"enc{k}.conv", x, 1))
        x = tg.maxpool2x(s)
        skips.append(s)
        pooled.append(x)
    return skips, pooled


def forward(model: SegModel, batch) -> Node:
    """Logits of shape [B, 1, R, R] for a [B, input_channels, R, R] batch."""
    batch = batch if isinstance(batch, Node) else tg.constant(batch)
    cfg = model.config
    expected = (cfg.input_channels, cfg.resolution, cfg.resolution)
    if batch.values.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeError(f"model expects [B, {expected[0]}, {expected[1]}, {expected[2]}], got {batch.shape}")
    skips, pooled = _encoder(model, batch)

    if cfg.topology == "fpn":
        p = model.apply_conv("fpn.lat3", pooled[3], 0)
        for k in reversed(range(N_STAGES - 1)):
            lat = model.apply_conv(f"fpn.lat{k}", pooled[k], 0)
            td = tg.upsample_nearest2x(p)
            merged = fpn_gate_forward(lat, td, model.gates[f"fpn.gate{k}"]) if cfg.quantum else classical_fpn_merge(lat, td)
            p = tg.relu(model.apply_conv(f"fpn.smooth{k}", merged, 1))
        return tg.upsample_nearest2x(model.apply_conv("head", p, 1))

    d = tg.relu(model.apply_conv("bottleneck.conv", pooled[-1], 1))
    for k in reversed(range(N_STAGES)):
        skip = skips[k]
        gate = model.gates.get(f"unet.gate{k}")
        if gate is not None:
            skip = skip_gate_forward(skip, gate)
        d = tg.relu(model.apply_conv(f"dec{k}.conv", tg.concat([tg.upsample_nearest2x(d), skip], axis=1), 1))
    return model.apply_conv("head", d, 0)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + flat little-endian float64 blob


def save_checkpoint(model: SegModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": model.config.to_dict(),
        "dtype": "<f8",
        "parameters": [
            {"name": p.name, "shape": list(p.values.shape), "group": p.group} for p in model.params.values()
        ],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    blob = np.concatenate([p.values.ravel() for p in model.params.values()]).astype("<f8")
    (directory / "checkpoint.bin").write_bytes(blob.tobytes())


def load_checkpoint(directory) -> SegModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    model = build_model(ModelConfig(**manifest["config"]))
    blob = np.frombuffer((directory / "checkpoint.bin").read_bytes(), dtype="<f8")
    offset = 0
    for entry in manifest["parameters"]:
        p = model.params.get(entry["name"])
        if p is None or list(p.values.shape) != entry["shape"]:
            raise ValueError(f"checkpoint entry {entry['name']} {entry['shape']} does not match the model")
        size = int(np.prod(entry["shape"]))
        p.node.values[...] = blob[offset : offset + size].reshape(entry["shape"])
        offset += size
    if offset != blob.size:
        raise ValueError(f"checkpoint has {blob.size} values, manifest accounts for {offset}")
    return model
