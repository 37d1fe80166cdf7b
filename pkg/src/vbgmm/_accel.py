"""Backend selection for the compiled kernels.

Set ``VBGMM_DISABLE_NUMBA=1`` to force the vectorized numpy path. The flag is
read once at import time.
"""

import os

_FALSY = {"", "0", "false", "no", "off"}

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

NUMBA_AVAILABLE = _numba is not None
DISABLED_BY_ENV = os.environ.get("VBGMM_DISABLE_NUMBA", "").strip().lower() not in _FALSY
USE_NUMBA = NUMBA_AVAILABLE and not DISABLED_BY_ENV


def njit(fn):
    """Compile ``fn`` in nopython mode when numba is importable.

    No fastmath: reassociation would break run-to-run reproducibility of
    reductions.
    """
    if _numba is None:
        return fn
    return _numba.njit(cache=True, fastmath=False)(fn)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
