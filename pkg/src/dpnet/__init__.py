"""Deformable part networks in NumPy: layers, models, training and tooling."""
from .model import Model, ModelConfig, build_baseline_cnn, build_dpn, extract_parse_trace
from .tensor import Rng

__version__ = "0.1.0"

__all__ = ["Model", "ModelConfig", "Rng", "build_baseline_cnn", "build_dpn", "extract_parse_trace"]
