import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # fall back to the pure NumPy kernels
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "mercatran.kernels._ckernels",
                ["src/mercatran/kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # no -ffast-math: the top-K scan relies on strict IEEE ordering
                extra_compile_args=["-O2"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
