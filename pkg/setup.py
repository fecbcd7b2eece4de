"""Build script for the compiled kernel extension.

The extension is optional: if it fails to build (no compiler, no Cython),
the package falls back to the pure-numpy kernels at import time.
Build in place with:  python setup.py build_ext --inplace
"""

import os

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = []
if cythonize is not None and not os.environ.get("POLYFORGE_NO_EXT"):
    extensions = cythonize(
        [
            Extension(
                "polyforge._kernels._native",
                ["src/polyforge/_kernels/_native.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=extensions)
