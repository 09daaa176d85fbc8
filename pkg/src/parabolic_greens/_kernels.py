"""Kernel dispatch: compiled extension when importable, pure Python otherwise.

Set ``PGREEN_PURE_PYTHON=1`` to force the fallback (used by the benchmark
and by the equivalence tests).
"""
import os

from . import _fallback

BACKEND = "python"
_compiled = None

if os.environ.get("PGREEN_PURE_PYTHON", "") != "1":
    try:
        from . import _core as _compiled

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _compiled = None

_impl = _compiled if _compiled is not None else _fallback

cn_forward_tridiag = _impl.cn_forward_tridiag
cn_adjoint_tridiag = _impl.cn_adjoint_tridiag
weighted_mgs = _impl.weighted_mgs


def compiled_available() -> bool:
    """Return True when the Cython extension could be imported."""
    if _compiled is not None:
        return True
    try:
        from . import _core  # noqa: F401
    except ImportError:
        return False
    return True


def get_backend(name: str):
    """Return the kernel namespace for ``"compiled"`` or ``"python"``."""
    if name == "python":
        return _fallback
    if name == "compiled":
        from . import _core

        return _core
    raise ValueError(f"unknown kernel backend {name!r}")
