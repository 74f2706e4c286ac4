"""Optional numba acceleration.

Kernels are decorated with :func:`njit`.  When numba is missing, or when the
environment variable ``OVERACT_DISABLE_JIT`` is set to a truthy value, the
decorator returns the plain Python function so the same kernels run as
ordinary numpy code (slower, but debuggable).
"""
import os

_FLAG = os.environ.get("OVERACT_DISABLE_JIT", "").strip().lower()
JIT_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

JIT_ENABLED = numba is not None and not JIT_DISABLED


def njit(func=None, **kwargs):
    """``numba.njit`` with caching, or a no-op when JIT is disabled."""
    if not JIT_ENABLED:
        if func is not None:
            return func
        return lambda f: f
    kwargs.setdefault("cache", True)
    if func is not None:
        return numba.njit(**kwargs)(func)
    return numba.njit(**kwargs)


def backend_name():
    return "numba" if JIT_ENABLED else "python"
