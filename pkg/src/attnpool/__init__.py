"""Spatial attention and temporal softmax pooling for clip classification."""

from .errors import ContractError, DimensionError, FormatError, NumericalError

__version__ = "0.1.0"

__all__ = ["ContractError", "DimensionError", "FormatError", "NumericalError", "__version__"]
