"""Build script for the optional compiled kernel core.

The package works without the extension (a numpy fallback is selected at
import time), so a missing Cython toolchain only costs speed.
"""

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "bhmaml._kernels._fastcore",
                ["src/bhmaml/_kernels/_fastcore.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
