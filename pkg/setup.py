import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# No -ffast-math: the exact-zero context-sensitivity contracts rely on
# IEEE semantics (0.0 * x == 0.0, exact underflow of masked attention).
extensions = [
    Extension(
        "lcnmt.kernels._hot",
        ["src/lcnmt/kernels/_hot.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
