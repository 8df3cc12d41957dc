"""Build script: compiles the optional Cython kernels.

The compiled extension is a pure speed-up.  If the build fails for any
reason (no compiler, no Cython) the package installs anyway and falls
back to the numpy implementations in evtraf._kernels.numpy_backend.
"""

import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


def _extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension

    ext = Extension(
        "evtraf._kernels._fast",
        sources=["src/evtraf/_kernels/_fast.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


class optional_build_ext(build_ext):
    """Let the install succeed even when the C toolchain is missing."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover - depends on toolchain
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover - depends on toolchain
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(
            "warning: compiled kernels unavailable, using numpy fallback "
            f"({exc})",
            file=sys.stderr,
        )


setup(ext_modules=_extensions(), cmdclass={"build_ext": optional_build_ext})
