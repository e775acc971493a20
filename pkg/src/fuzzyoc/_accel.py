"""Numba toggle.

Set ``FUZZYOC_DISABLE_NUMBA=1`` to run every kernel through its pure-numpy
twin. Numba is also skipped when it is not importable.
"""

import os

try:
    import numba
except ModuleNotFoundError:  # pragma: no cover - numba is a hard dep in practice
    numba = None

_FLAG = os.environ.get("FUZZYOC_DISABLE_NUMBA", "").strip().lower()
NUMBA_ENABLED = numba is not None and _FLAG not in {"1", "true", "yes", "on"}
NUMBA_AVAILABLE = numba is not None


def njit(f=None, **setting):
    """``numba.njit`` with caching, or the identity when numba is missing."""
    setting.setdefault("cache", True)
    if numba is None:
        return f if f is not None else (lambda g: g)
    if f is None:
        return lambda g: numba.njit(g, **setting)
    return numba.njit(f, **setting)
