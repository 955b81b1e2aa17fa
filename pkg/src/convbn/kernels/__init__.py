"""Kernel backend selection.

The compiled Cython extension is used when it is importable; otherwise the
numpy fallback takes over.  ``CONVBN_BACKEND=numpy|cython`` in the
environment pins the choice at import time, and :func:`set_backend` switches
it at runtime (used by tests and the backend-comparison benchmark).
"""

import os

from . import numpy_backend

try:
    from . import _conv_cy
    _HAVE_CYTHON = True
except ImportError:
    _conv_cy = None
    _HAVE_CYTHON = False

_BACKENDS = {"numpy": numpy_backend}
if _HAVE_CYTHON:
    _BACKENDS["cython"] = _conv_cy

_active_name = os.environ.get("CONVBN_BACKEND", "cython" if _HAVE_CYTHON else "numpy")
if _active_name not in _BACKENDS:
    raise ImportError(
        f"CONVBN_BACKEND={_active_name!r} is not available; "
        f"choices: {sorted(_BACKENDS)}"
    )
_active = _BACKENDS[_active_name]


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return _active_name


def set_backend(name):
    """Switch the active kernel backend; returns the previous name."""
    global _active, _active_name
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choices: {sorted(_BACKENDS)}")
    previous = _active_name
    _active_name = name
    _active = _BACKENDS[name]
    return previous


def conv2d_forward_padded(xp, w, bias, sh, sw, ho, wo):
    return _active.conv2d_forward_padded(xp, w, bias, sh, sw, ho, wo)


def conv2d_dw_padded(xp, dy, kh, kw, sh, sw):
    return _active.conv2d_dw_padded(xp, dy, kh, kw, sh, sw)


def conv2d_dx_padded(dy, w, hp, wp, sh, sw):
    return _active.conv2d_dx_padded(dy, w, hp, wp, sh, sw)
