"""Backend selection for the hot kernels.

The compiled extension is used when it imports; ``FEDREC_PURE_PYTHON=1``
forces the NumPy fallback. ``BACKEND`` names the active choice.
"""

from __future__ import annotations

import os

from fedrec import _fallback

SGD = _fallback.SGD
ADAM = _fallback.ADAM

_ext = None
if os.environ.get("FEDREC_PURE_PYTHON") != "1":
    try:
        from fedrec import _kernels as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "python"
_impl = _ext if _ext is not None else _fallback

neumf_step = _impl.neumf_step
best_subset = _impl.best_subset


def get(backend: str):
    """Kernel namespace for ``"cython"`` or ``"python"``, regardless of the default."""
    if backend == "python":
        return _fallback
    if backend == "cython":
        if _ext is None:
            from fedrec import _kernels

            return _kernels
        return _ext
    raise ValueError(f"unknown backend {backend!r}")


def extension_available() -> bool:
    try:
        from fedrec import _kernels  # noqa: F401
    except ImportError:
        return False
    return True
