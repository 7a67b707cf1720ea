"""Complex-unitary sequence modeling: Cayley-step state evolution under
low-rank Hermitian generators, quadratic (Born) decoding, probability-current
diagnostics, and the dimensional-separation task apparatus."""

__version__ = "0.1.0"

from .exceptions import (
    ConfigurationError,
    CusmError,
    DegenerateFactorizationError,
    DegenerateInitializationError,
    DegenerateMeasurementError,
    IllConditionedStepError,
    InvalidDimensionError,
    NonHermitianError,
    VocabularyError,
)

__all__ = [
    "__version__",
    "ConfigurationError",
    "CusmError",
    "DegenerateFactorizationError",
    "DegenerateInitializationError",
    "DegenerateMeasurementError",
    "IllConditionedStepError",
    "InvalidDimensionError",
    "NonHermitianError",
    "VocabularyError",
]
