"""Backend selection for the convolution kernels.

The compiled extension is used when it imported cleanly; set
``EATN_BACKEND=python`` to force the numpy kernels (``compiled`` makes a
missing extension an import error instead of a silent fallback).
"""
import os

import numpy as np

from . import _conv_py

_requested = os.environ.get("EATN_BACKEND", "auto").lower()
if _requested not in ("auto", "compiled", "python"):
    raise ImportError(f"EATN_BACKEND must be auto, compiled or python, got {_requested!r}")

_ext = None
if _requested != "python":
    try:
        from . import _conv_ext as _ext
    except ImportError:
        if _requested == "compiled":
            raise
        _ext = None

BACKEND = "compiled" if _ext is not None else "python"


def conv2d_forward(x, w, b, mask, backend=None):
    mod = _select(backend)
    return mod.conv2d_forward(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(b, dtype=np.float64),
        np.ascontiguousarray(mask, dtype=np.uint8),
    )


def conv2d_backward(x, w, mask, g, backend=None):
    mod = _select(backend)
    return mod.conv2d_backward(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(mask, dtype=np.uint8),
        np.ascontiguousarray(g, dtype=np.float64),
    )


def _select(backend):
    if backend is None:
        backend = BACKEND
    if backend == "compiled":
        if _ext is None:
            raise RuntimeError("compiled convolution extension is not available")
        return _ext
    if backend == "python":
        return _conv_py
    raise ValueError(f"unknown backend {backend!r}")


def available_backends():
    return ["compiled", "python"] if _ext is not None else ["python"]
