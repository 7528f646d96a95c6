from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-python install; kernels.py falls back to numpy
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("perturb_learn._kernels", ["src/perturb_learn/_kernels.pyx"],
                   extra_compile_args=["-O3"], optional=True)],
        language_level=3,
    )

setup(ext_modules=ext_modules)
