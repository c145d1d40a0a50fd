"""Kernel backend selection.

Prefers the compiled extension; falls back to the numpy implementation
when the extension is missing or ``MRCBF_PURE_PYTHON`` is set.
"""
import os

if os.environ.get("MRCBF_PURE_PYTHON"):
    from . import _slowkernel as kernel

    BACKEND = "python"
else:
    try:
        from . import _fastkernel as kernel  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        from . import _slowkernel as kernel

        BACKEND = "python"

segway_rates = kernel.segway_rates
rk4_rollout = kernel.rk4_rollout
ldl_solve = kernel.ldl_solve
