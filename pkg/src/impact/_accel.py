"""Backend switch for the hot numeric kernels.

Set ``IMPACT_NUMBA=0`` in the environment before import to force the
pure-numpy path. When numba is missing the numpy path is used regardless.
"""

from __future__ import annotations

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_OFF = {"0", "false", "no", "off"}

USE_NUMBA: bool = HAVE_NUMBA and os.environ.get("IMPACT_NUMBA", "1").strip().lower() not in _OFF


def njit(fn=None, *, fastmath: bool = False):
    """Compile ``fn`` in nopython mode if numba is importable, else return it unchanged."""
    if fn is None:
        return lambda f: njit(f, fastmath=fastmath)
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True, fastmath=fastmath)(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
