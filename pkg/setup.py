"""Build script: compiles the optional fast convolution kernels.

The compiled extension is a pure speedup; if Cython or a C compiler is
unavailable the install proceeds without it and `imas.kernels` falls back to
the numpy implementation at import time. Set IMAS_NO_EXT=1 to skip the
extension build explicitly.
"""

import os

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """build_ext that degrades to a warning instead of failing the install."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # missing compiler/toolchain
            print(f"warning: skipping compiled kernels ({exc}); "
                  f"numpy fallback will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: could not build {ext.name} ({exc}); "
                  f"numpy fallback will be used")


def extensions():
    if os.environ.get("IMAS_NO_EXT") == "1":
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("warning: Cython not installed; building without compiled kernels")
        return []
    ext = Extension(
        "imas.kernels._conv_cy",
        ["src/imas/kernels/_conv_cy.pyx"],
        extra_compile_args=["-O3", "-march=native", "-fno-math-errno"],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
