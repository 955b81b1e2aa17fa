import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# No -ffast-math / -march=native, and FP contraction pinned off: the kernels
# promise a fixed IEEE summation order, identical to the numpy fallback
# (fused multiply-adds would round differently on FMA-capable hosts).
extensions = [
    Extension(
        "convbn.kernels._conv_cy",
        ["src/convbn/kernels/_conv_cy.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
