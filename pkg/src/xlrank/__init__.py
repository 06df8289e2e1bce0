"""Modular cross-lingual reranking: tiny transformer encoders trained from
scratch, composable language/task adaptation (bottleneck adapters and sparse
difference masks), multi-stage retrieval, and run-file evaluation tooling.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FingerprintMismatch,
    NumericError,
    XlrankError,
)
from .tensor import Tape, Tensor

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "FingerprintMismatch",
    "NumericError",
    "XlrankError",
    "Tape",
    "Tensor",
    "__version__",
]
