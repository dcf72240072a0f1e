"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``REGNF_DISABLE_NUMBA`` is not
set to a truthy value. ``REGNF_NUM_THREADS`` caps the numba thread pool.
Both paths compute the same quantities; outputs are written per element, so
results do not depend on the thread count.
"""

import os

from . import _numpy

_disabled = os.environ.get("REGNF_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

# the bundled TBB is too old for numba; workqueue is always present
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    if _disabled:
        raise ImportError("disabled by REGNF_DISABLE_NUMBA")
    from . import _numba
    NUMBA_AVAILABLE = True
except ImportError:
    _numba = None
    NUMBA_AVAILABLE = False

BACKEND = "numba" if NUMBA_AVAILABLE else "numpy"


def set_num_threads(n):
    if NUMBA_AVAILABLE and n:
        import numba
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


if NUMBA_AVAILABLE and os.environ.get("REGNF_NUM_THREADS"):
    set_num_threads(os.environ["REGNF_NUM_THREADS"])

_impl = _numba if NUMBA_AVAILABLE else _numpy

trilinear = _impl.trilinear
spfh_histograms = _impl.spfh_histograms
fpfh_accumulate = _impl.fpfh_accumulate

__all__ = ["BACKEND", "NUMBA_AVAILABLE", "set_num_threads",
           "trilinear", "spfh_histograms", "fpfh_accumulate"]
