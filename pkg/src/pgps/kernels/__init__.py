"""Hot numeric kernels with a selectable backend.

The inner loops that dominate training time (3D convolution forward and
backward passes, trilinear resampling) are compiled with numba by default.
Setting the environment variable ``PGPS_BACKEND=numpy`` before import
selects a pure-numpy fallback with identical semantics; the two backends
agree to floating-point round-off (they accumulate in different orders, so
results are not bitwise identical across backends).

Within one backend every kernel uses a fixed accumulation order, so results
are bitwise reproducible run to run and independent of thread or worker
counts.

``benchmarks/bench_kernels.py`` times the two backends against each other.
"""

import os

from . import numpy_backend

_ENV_VAR = "PGPS_BACKEND"
_VALID = ("numba", "numpy")


def _select_backend() -> str:
    choice = os.environ.get(_ENV_VAR, "numba").lower()
    if choice not in _VALID:
        raise ValueError(f"{_ENV_VAR} must be one of {_VALID}, got {choice!r}")
    if choice == "numba":
        try:
            from . import numba_backend  # noqa: F401
        except ImportError:
            return "numpy"
    return choice


_BACKEND_NAME = _select_backend()

if _BACKEND_NAME == "numba":
    from . import numba_backend as _impl
else:
    _impl = numpy_backend

conv3d_forward = _impl.conv3d_forward
conv3d_grad_input = _impl.conv3d_grad_input
conv3d_grad_weights = _impl.conv3d_grad_weights
trilinear_resample = _impl.trilinear_resample

# Resolution-independent helpers live in the numpy backend only; they are
# plain vectorized indexing with no inner loop worth compiling.
nearest_resample = numpy_backend.nearest_resample
upsample_nearest = numpy_backend.upsample_nearest
downsample_sum = numpy_backend.downsample_sum


def active_backend() -> str:
    """Name of the backend selected at import time."""
    return _BACKEND_NAME
