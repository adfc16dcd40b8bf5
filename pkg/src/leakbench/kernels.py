"""Hot convolution kernels, compiled when available.

The compiled core (``leakbench._ckernels``) is built from Cython at install
time. If it is missing, or ``LEAKBENCH_PURE_PYTHON=1`` is set, the numpy
fallback in :mod:`leakbench._kernels_py` is used instead. Both produce
bit-identical results.
"""

import os

from leakbench import _kernels_py

BACKEND = "python"
im2col = _kernels_py.im2col
col2im = _kernels_py.col2im
out_size = _kernels_py.out_size

if os.environ.get("LEAKBENCH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from leakbench import _ckernels
    except ImportError:  # pragma: no cover - depends on build
        pass
    else:
        BACKEND = "cython"
        im2col = _ckernels.im2col
        col2im = _ckernels.col2im
