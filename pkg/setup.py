"""Build script for the optional compiled kernels.

Without Cython the package installs as pure Python and falls back to the
numpy kernels at import time.
"""

from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "gscart._ckernels",
                ["src/gscart/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
