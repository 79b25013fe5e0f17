"""Fairness-aware partial-label domain adaptation for voice-based PD/ALS screening."""

from .errors import CacheError, ConfigError, FairPDAError, NumericalAbort, ValidationError

__version__ = "0.1.0"

__all__ = ["CacheError", "ConfigError", "FairPDAError", "NumericalAbort", "ValidationError", "__version__"]
