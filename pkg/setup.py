import os

from setuptools import setup

ext_modules = []
if os.environ.get("MTUDA_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("mtuda._ckernels", ["src/mtuda/_ckernels.pyx"],
                       include_dirs=[np.get_include()])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # no cython / numpy at build time: the pure-Python kernels are used
        ext_modules = []

setup(ext_modules=ext_modules)
