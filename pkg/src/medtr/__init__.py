"""Multi-encoder-decoder transformer for code-switching sequence recognition."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    InfeasibleError,
    InputError,
    MedtrError,
    NumericError,
    TransplantError,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "InfeasibleError",
    "InputError",
    "MedtrError",
    "NumericError",
    "TransplantError",
    "__version__",
]
