"""Mesh classification on triangle meshes: mesh I/O and topology, a small
reverse-mode autodiff engine, QEM decimation, and five classifiers
(Chebyshev, spiral, edge-collapse, face-based and point-based) with a
synthetic benchmark."""

from .bench import RunConfig, confusion_metrics, run_benchmark, train
from .mesh import MeshError, TriMesh
from .models import build_model
from .synth import SynthSpec, generate_dataset, separability_check

__all__ = [
    "MeshError",
    "RunConfig",
    "SynthSpec",
    "TriMesh",
    "build_model",
    "confusion_metrics",
    "generate_dataset",
    "run_benchmark",
    "separability_check",
    "train",
]
__version__ = "0.1.0"
