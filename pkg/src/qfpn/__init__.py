"""Quantum feature-pyramid gating for binary image segmentation, simulated on CPU."""

from .qsim import CircuitParams, Statevector, run_circuit, circuit_gradients
from .segnet import ModelConfig, build_model, forward
from .trainer import TrainConfig, train

__all__ = [
    "CircuitParams",
    "Statevector",
    "run_circuit",
    "circuit_gradients",
    "ModelConfig",
    "build_model",
    "forward",
    "TrainConfig",
    "train",
]
__version__ = "0.1.0"
