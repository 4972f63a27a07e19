"""Particle simulation of multi-valued mean-field SDEs with jumps, with averaging and stability diagnostics."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BlowUpError,
    CapabilityError,
    ConfigError,
    ConvergenceError,
    InfeasibleSetError,
    InvalidInputError,
    MVSDEError,
)

__all__ = [
    "__version__",
    "BlowUpError",
    "CapabilityError",
    "ConfigError",
    "ConvergenceError",
    "InfeasibleSetError",
    "InvalidInputError",
    "MVSDEError",
]
