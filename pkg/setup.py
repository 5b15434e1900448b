from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "odyssey._kernels._pipeline_c",
                ["src/odyssey/_kernels/_pipeline_c.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # No Cython: install pure-Python only; the kernel dispatcher falls back.
    extensions = []

setup(ext_modules=extensions)
