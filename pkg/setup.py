"""Build script for the optional compiled kernels; the package works without them."""
import os
import platform
import sys

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("NEUROENCODE_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        compile_args, link_args = ["-O3"], []
        if sys.platform.startswith("linux") and platform.machine() == "x86_64":
            # lets gcc vectorise exp() through glibc's libmvec
            compile_args.append("-ffast-math")
            link_args += ["-lmvec", "-lm"]
        ext_modules = cythonize(
            [Extension("neuroencode._ckernels", ["src/neuroencode/_ckernels.pyx"], include_dirs=[np.get_include()],
                       extra_compile_args=compile_args, extra_link_args=link_args)],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
