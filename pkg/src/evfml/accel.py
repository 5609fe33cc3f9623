"""Optional numba acceleration for the hot simulation kernels.

The package runs in two modes:

* accelerated (default): kernels decorated with ``numba.njit``;
* pure numpy/python fallback: set ``EVFML_NUMBA=0`` (or any of
  ``0/false/off``) in the environment before import.

Both modes execute the same source, so results are bit-identical; the
fallback is much slower and exists for debugging and for environments
without numba.  ``benchmarks/bench_kernels.py`` compares the two.
"""

import os

__all__ = ["NUMBA_ENABLED", "njit"]


def _env_wants_numba() -> bool:
    flag = os.environ.get("EVFML_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


NUMBA_ENABLED = False
if _env_wants_numba():
    try:
        import numba  # noqa: F401

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a hard dep normally
        NUMBA_ENABLED = False


def njit(*args, **kwargs):
    """``numba.njit`` when acceleration is on, identity decorator otherwise."""
    if NUMBA_ENABLED:
        import numba

        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]

    def wrap(func):
        return func

    return wrap
