import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffast-math lets gcc call glibc's vector expf/exp inside the GELU loops.
# SPACKLE_PORTABLE=1 drops -march=native for builds that must run elsewhere.
compile_args = ["-O3", "-ffast-math", "-fopenmp-simd"]
if not os.environ.get("SPACKLE_PORTABLE"):
    compile_args.append("-march=native")

extensions = [
    Extension(
        "spackle._kernels",
        ["src/spackle/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=compile_args,
        libraries=["m"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
