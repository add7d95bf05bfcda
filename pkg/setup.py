from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    # No Cython: the package still works on the numpy fallback kernels.
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "clmfit._zncc",
                ["src/clmfit/_zncc.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
