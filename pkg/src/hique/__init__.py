"""Question-structured multimodal depression screening from clinical interviews."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AdapterConfigurationError,
    DataValidationError,
    DivergenceError,
    HiqueRuntimeError,
    TaxonomyError,
    TranscriptError,
)

__all__ = [
    "__version__",
    "AdapterConfigurationError",
    "DataValidationError",
    "DivergenceError",
    "HiqueRuntimeError",
    "TaxonomyError",
    "TranscriptError",
]
