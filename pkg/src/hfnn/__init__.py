"""Physics-informed networks and operator networks for steady pipe and aneurysm flow.

Submodules: ``autodiff``, ``nn``, ``physics``, ``geometry``, ``operators``,
``training``, ``evaluation``, ``config``, ``experiments`` and ``cli``.
"""

from . import autodiff, geometry, nn, operators, physics, training
from .errors import (
    ConfigurationError,
    DegenerateScenarioError,
    DivergenceError,
    DomainError,
    HfnnError,
    UsageError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "geometry",
    "nn",
    "operators",
    "physics",
    "training",
    "ConfigurationError",
    "DegenerateScenarioError",
    "DivergenceError",
    "DomainError",
    "HfnnError",
    "UsageError",
    "ValidationError",
]
