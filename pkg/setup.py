"""Build script. The compiled kernel extension is optional: when Cython or a
C toolchain is unavailable the package installs pure and falls back to the
NumPy kernel implementations at import time."""

import os

from setuptools import Extension, setup


def _extensions():
    if not os.path.exists("src/actok/_fastkern.pyx"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "actok._fastkern",
        ["src/actok/_fastkern.pyx"],
        include_dirs=[np.get_include()],
        # fp-contract=off: keep a*b+c as two rounded ops so compiled results
        # track the NumPy backend (FMA contraction could flip argmin ties).
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=_extensions())
