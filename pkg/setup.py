"""Builds the optional compiled kernels; the package works without them."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("SAVEDRL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "savedrl.kernels._ckernels",
                    ["src/savedrl/kernels/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
