"""Build the optional compiled kernels; the package works without them."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("SMARTINF_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("smartinf._kernels", ["src/smartinf/_kernels.pyx"],
                       extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"])],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
