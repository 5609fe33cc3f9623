"""Equation/variable-free manifold learning, bifurcation analysis and control."""

__version__ = "0.1.0"

from . import (  # noqa: F401
    accel,
    continuation,
    control,
    manifold,
    market,
    timestepper,
    traffic,
)
from .dataset import Dataset  # noqa: F401
