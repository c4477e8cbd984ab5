"""Build script for the optional compiled attention kernels.

The package works without the extension (a NumPy fallback is selected at
import time); set CASM_SKIP_EXT=1 to force a pure-Python build.

Build in place for development:
    python setup.py build_ext --inplace
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("CASM_SKIP_EXT") != "1":
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "casm.kernels._attention_cy",
                ["src/casm/kernels/_attention_cy.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3", "-fopenmp"],
                extra_link_args=["-fopenmp"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
