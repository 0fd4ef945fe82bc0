"""Backend selection for the conv patch kernels.

The compiled Cython extension is preferred; the numpy implementation is the
fallback when the extension was not built.  ``HALC_KERNELS=python`` forces the
fallback, ``HALC_KERNELS=cython`` fails loudly if the extension is missing.
"""

import os

from . import patches_py

_BACKENDS = {"python": patches_py}
try:
    from . import _patches

    _BACKENDS["cython"] = _patches
except ImportError:
    _patches = None

_forced = os.environ.get("HALC_KERNELS", "").strip().lower()
if _forced:
    if _forced not in _BACKENDS:
        raise ImportError(
            f"HALC_KERNELS={_forced!r} unavailable (have: {sorted(_BACKENDS)})"
        )
    BACKEND = _forced
else:
    BACKEND = "cython" if "cython" in _BACKENDS else "python"

_active = _BACKENDS[BACKEND]


def available_backends():
    return sorted(_BACKENDS)


def get_backend(name: str):
    """Return the kernel module for `name` ('python' or 'cython')."""
    return _BACKENDS[name]


def use_backend(name: str) -> str:
    """Switch the active backend; returns the previous backend name."""
    global _active, BACKEND
    previous = BACKEND
    _active = _BACKENDS[name]
    BACKEND = name
    return previous


def im2col(x, kh, kw, stride, padding):
    return _active.im2col(x, kh, kw, stride, padding)


def col2im(cols, c, h, w, kh, kw, stride, padding):
    return _active.col2im(cols, c, h, w, kh, kw, stride, padding)
