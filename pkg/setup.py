"""Build script for the optional compiled kernel extension.

The package works without the extension (a NumPy fallback is selected at
import time); set SPECSTREAM_SKIP_BUILD=1 to skip compilation entirely.
"""
import os

from setuptools import Extension, setup


def make_ext_modules():
    if os.environ.get("SPECSTREAM_SKIP_BUILD") == "1":
        return []
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "specstream._kernels._core",
        sources=["src/specstream/_kernels/_core.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=make_ext_modules())
