import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("MEXFLOW_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "mexflow._kernels._native",
                    ["src/mexflow/_kernels/_native.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # No Cython toolchain: install pure-Python; the kernel shim falls
        # back to the numpy implementations at import time.
        ext_modules = []

setup(ext_modules=ext_modules)
