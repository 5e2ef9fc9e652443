"""Desk-scale generalizable radiance-field rendering with flare-occupancy masking."""

from .errors import DegenerateData, GnfrError, ValidationError

__version__ = "0.1.0"

__all__ = ["GnfrError", "ValidationError", "DegenerateData", "__version__"]
