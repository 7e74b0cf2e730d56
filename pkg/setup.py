"""Build script: compiles the optional convolution extension.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile only costs speed, not functionality.
Set CACTUS_SKIP_EXT=1 to skip the compile step entirely.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("CACTUS_SKIP_EXT", "") not in ("1", "true"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "cactus._kernels._conv_cy",
                    sources=["src/cactus/_kernels/_conv_cy.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
