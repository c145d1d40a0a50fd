"""Measurement-robust control barrier function safety filters.

Safe control under bounded state-estimation error: barrier conditions are
tightened by error-proportional margins and solved per step as small
second-order cone programs, validated on a simulated planar Segway.
"""
from ._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
