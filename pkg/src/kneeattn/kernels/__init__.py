"""Kernel backend selection.

The compiled Cython extension is preferred when it is importable; otherwise
the pure-numpy implementation is used. Set KNEEATTN_BACKEND=python to force
the fallback, or =cython to require the extension (raising if missing).
"""

import os

from . import pykernels
from .pykernels import conv2d_out_hw, same_pad_amounts


def _select():
    choice = os.environ.get("KNEEATTN_BACKEND", "auto").lower()
    if choice not in ("auto", "cython", "python"):
        raise ValueError(f"KNEEATTN_BACKEND must be auto, cython or python, got {choice!r}")
    if choice == "python":
        return pykernels, "python"
    try:
        from . import _fastkernels
    except ImportError:
        if choice == "cython":
            raise
        return pykernels, "python"
    return _fastkernels, "cython"


def get_backend(name):
    """Explicit backend handle, for parity tests and benchmarks."""
    if name == "python":
        return pykernels
    if name == "cython":
        from . import _fastkernels

        return _fastkernels
    raise ValueError(f"unknown backend {name!r}")


_impl, BACKEND = _select()

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "conv2d_out_hw",
    "same_pad_amounts",
    "get_backend",
]
