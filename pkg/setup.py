"""Build script for the compiled sequence kernels.

The extension is optional: if it fails to build (no compiler, no Cython),
the package falls back to the pure-numpy kernels at import time.

gatemath.c is compiled with -ffast-math in its own translation unit so the
compiler can vectorize its elementwise exp/tanh loops with the SIMD math
library; the Cython-generated code keeps strict IEEE flags.
"""

import numpy
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

PER_SOURCE_FLAGS = {"gatemath.c": ["-ffast-math"]}


class BuildExt(build_ext):
    def build_extensions(self):
        original = self.compiler._compile

        def compile_one(obj, src, ext, cc_args, extra_postargs, pp_opts):
            extra = list(extra_postargs)
            for name, flags in PER_SOURCE_FLAGS.items():
                if src.endswith(name):
                    extra += flags
            return original(obj, src, ext, cc_args, extra, pp_opts)

        self.compiler._compile = compile_one
        try:
            super().build_extensions()
        finally:
            self.compiler._compile = original


ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "dpsarnn.backend._kernels",
                ["src/dpsarnn/backend/_kernels.pyx",
                 "src/dpsarnn/backend/gatemath.c"],
                include_dirs=[numpy.get_include(), "src/dpsarnn/backend"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
                libraries=["m"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules, cmdclass={"build_ext": BuildExt})
