"""Optional compiled-kernel build.

The package is pure Python by default. When Cython and a C compiler are
available, the hot kernels (tokenizer scan, hashed bag-of-words embedding)
are compiled into ehrrag._kernels._speedups:

    python setup.py build_ext --inplace

If the extension is absent at import time the package silently falls back
to the pure-Python implementation in ehrrag._kernels.fallback.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("EHRRAG_SKIP_EXT") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            ["src/ehrrag/_kernels/_speedups.pyx"],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        pass

setup(ext_modules=ext_modules)
