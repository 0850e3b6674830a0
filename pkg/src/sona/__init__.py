"""Desk-scale SONA: diffusion-guided outlier synthesis for OOD detection on a synthetic benchmark."""

from sona.substrate import ConfigError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "NumericError", "__version__"]
