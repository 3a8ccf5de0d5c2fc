import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "bipartite_lb._kernel",
                ["src/bipartite_lb/_kernel.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )

# Without Cython the package installs pure-Python only; the simulator then
# falls back to bipartite_lb._pykernel at import time.
setup(ext_modules=ext_modules)
