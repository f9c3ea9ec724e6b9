"""Build script: compiles the optional CTC extension module.

The package works without the extension (a numpy fallback is selected at
import time), so any failure here degrades to a pure-Python install rather
than aborting.
"""

from setuptools import setup

extensions = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = cythonize(
        [
            Extension(
                "medtr._ctc_ext",
                ["src/medtr/_ctc_ext.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    print(f"medtr: skipping compiled CTC core ({exc}); using pure-Python backend")

setup(ext_modules=extensions)
