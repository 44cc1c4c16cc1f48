import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    # -ffp-contract=off keeps the compiled kernels bit-compatible with the
    # numpy fallback (no FMA contraction of a*b+c).
    ext = Extension(
        "lcpaths._kernels",
        ["src/lcpaths/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=[
            "-O3",
            "-march=native",
            "-fno-math-errno",
            "-ffp-contract=off",
        ],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
    ext_modules = cythonize([ext], compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
