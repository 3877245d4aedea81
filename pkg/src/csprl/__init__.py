"""Continual subspace-of-policies reinforcement learning on a toy point-mass task family."""
from __future__ import annotations

from ._backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
