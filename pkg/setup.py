"""Build script: compiles the optional fast kernel extension.

The package is fully functional without the extension (a pure-numpy
fallback is selected at import time), so a failed compile only costs
speed, not correctness.
"""
import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "mrcbf._fastkernel",
                ["src/mrcbf/_fastkernel.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
