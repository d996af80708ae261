"""Memory-based variational inference for auto-associative retrieval."""
from .errors import ConfigError, EmptyMemoryError, MemviError, NumericError, ShapeError
from .kernels import BACKEND
from .memory import MCHN, BalancedGMM, MemoryMatrix, PrecisionGMM
from .model import Layer, LayerStack, VaeModel
from .retrieval import RetrievalConfig, RetrievalResult, retrieve

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BalancedGMM",
    "ConfigError",
    "EmptyMemoryError",
    "Layer",
    "LayerStack",
    "MCHN",
    "MemoryMatrix",
    "MemviError",
    "NumericError",
    "PrecisionGMM",
    "RetrievalConfig",
    "RetrievalResult",
    "ShapeError",
    "VaeModel",
    "retrieve",
]
