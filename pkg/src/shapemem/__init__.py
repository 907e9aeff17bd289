"""Memory-guided point cloud completion at desk scale."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, gradient_check
from .errors import (
    ContractError,
    DomainError,
    EvaluationError,
    FormatError,
    StateError,
)

__all__ = [
    "Tape",
    "Tensor",
    "gradient_check",
    "ContractError",
    "DomainError",
    "EvaluationError",
    "FormatError",
    "StateError",
    "__version__",
]
