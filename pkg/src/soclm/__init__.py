"""Socially enriched language-model pre-training at desk scale."""
from ._accel import USE_NUMBA, backend

__version__ = "0.1.0"

__all__ = ["USE_NUMBA", "backend", "__version__"]
