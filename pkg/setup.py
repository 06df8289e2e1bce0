import os

import numpy as np
from setuptools import Extension, setup

# XLRANK_SKIP_EXT=1 installs the pure-numpy backend only; the package
# falls back to it at import time whenever the extension is missing.
if os.environ.get("XLRANK_SKIP_EXT"):
    ext_modules = []
else:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "xlrank.kernels._fast",
                ["src/xlrank/kernels/_fast.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "initializedcheck": False,
            "cdivision": True,
        },
    )

setup(ext_modules=ext_modules)
