"""Builds the optional compiled kernel extension.

The package works without it: ``finermoe._backend`` falls back to the
pure-NumPy kernels (bit-identical results, slower). The extension is
skipped, with a warning, when Cython or a C compiler is unavailable.

-ffp-contract=off is required: the fallback relies on the compiled inner
loop rounding every multiply and add separately (no FMA fusion).
"""

import warnings

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "finermoe._kernels",
                ["src/finermoe/_kernels.pyx"],
                extra_compile_args=["-O3", "-ffp-contract=off", "-fopenmp"],
                extra_link_args=["-fopenmp"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    warnings.warn("Cython not available; installing with pure-NumPy kernels only")

setup(ext_modules=ext_modules)
