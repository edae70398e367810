"""Affective correspondence learning between music and images."""

from .errors import (AffcorrError, DataError, DivergenceError, FormatError, InvalidInput,
                     NoLabel, ShapeError, StateError)

__version__ = "0.1.0"

__all__ = [
    "AffcorrError", "DataError", "DivergenceError", "FormatError", "InvalidInput", "NoLabel",
    "ShapeError", "StateError",
]
