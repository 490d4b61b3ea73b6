import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - build without Cython falls back to pure Python
    cythonize = None

ext_modules = []
if cythonize is not None and os.environ.get("ROBUSTCF_NO_EXT") != "1":
    ext_modules = cythonize(
        [
            Extension(
                "robustcf._kernels",
                ["src/robustcf/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
