"""Novelty-detection engine: backbone features, k-NN/GMM scoring, PGD evaluation."""

__version__ = "0.1.0"

from .errors import EngineError, FormatError, NumericError, ValidationError
from .tensor import Tape, Tensor, backward

__all__ = [
    "__version__",
    "EngineError", "FormatError", "NumericError", "ValidationError",
    "Tensor", "Tape", "backward",
]
