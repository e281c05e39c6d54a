import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    # The package runs on the pure-numpy kernel fallback without the extension.
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "tsmoe.kernels._fast",
                ["src/tsmoe/kernels/_fast.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
