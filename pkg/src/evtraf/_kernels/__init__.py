"""Hot-loop kernels with backend selection at import time.

Prefers the compiled Cython extension; falls back to the numpy
implementations when the extension is missing or when the environment
variable EVTRAF_PURE_PYTHON is set to a non-empty value.
"""

import os

from . import numpy_backend

if os.environ.get("EVTRAF_PURE_PYTHON"):
    _impl = numpy_backend
    BACKEND = "numpy"
else:
    try:
        from . import _fast as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = numpy_backend
        BACKEND = "numpy"

seg_softmax = _impl.seg_softmax
seg_softmax_grad = _impl.seg_softmax_grad
gather_weighted_sum = _impl.gather_weighted_sum
gather_weighted_sum_grad = _impl.gather_weighted_sum_grad
godunov_window = _impl.godunov_window
