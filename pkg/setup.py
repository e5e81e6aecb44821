import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

# -O3 without -ffast-math: the compositing kernels must stay bit-reproducible
# across thread counts, so IEEE semantics are kept.
extensions = [
    Extension(
        "splatbody.rasterizer._kernels",
        ["src/splatbody/rasterizer/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3", "-fopenmp"],
        extra_link_args=["-fopenmp"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
