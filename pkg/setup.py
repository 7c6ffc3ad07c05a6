from setuptools import Extension, setup

# The compiled stepping kernel is optional: without a working Cython/C
# toolchain the package falls back to the numpy implementation at import.
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "shelab._core",
                ["src/shelab/_core.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
