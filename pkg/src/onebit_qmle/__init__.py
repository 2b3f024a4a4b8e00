"""One-bit locally private quantile regression by quasi-maximum likelihood."""

__version__ = "0.1.0"

from .errors import (
    CapabilityError,
    ConfigurationError,
    DataError,
    DomainError,
    NumericalError,
    OneBitQMLEError,
    SingularMatrixError,
)
from .mechanisms import PrivacyBudget, TruncationInterval
from .quantile_model import PsiConfig, QuantileModel

__all__ = [
    "CapabilityError",
    "ConfigurationError",
    "DataError",
    "DomainError",
    "NumericalError",
    "OneBitQMLEError",
    "PrivacyBudget",
    "PsiConfig",
    "QuantileModel",
    "SingularMatrixError",
    "TruncationInterval",
]
