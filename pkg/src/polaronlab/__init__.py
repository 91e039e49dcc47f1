"""Polarons of lattice-trapped impurities in a one-dimensional Bose-Einstein condensate."""

__version__ = "0.1.0"

from .errors import ConvergenceError, ValidationError  # noqa: E402
from .params import SystemParams, check_validity, derive_scales, preset  # noqa: E402

__all__ = ["ConvergenceError", "SystemParams", "ValidationError", "__version__", "check_validity",
           "derive_scales", "preset"]
