"""Kernel backend selection.

Two interchangeable implementations of the LSTM sequence kernels exist:
the compiled Cython module (``ext``) and a pure-numpy fallback (``numpy``).
The compiled one is preferred when importable; ``DPSARNN_BACKEND=numpy``
forces the fallback, and :func:`use` switches at runtime (used by the
backend-comparison benchmark).
"""

import os

from . import numpy_kernels

try:
    from . import _kernels as ext_kernels
except ImportError:
    ext_kernels = None

_BACKENDS = {"numpy": numpy_kernels}
if ext_kernels is not None:
    _BACKENDS["ext"] = ext_kernels

active = _BACKENDS.get(os.environ.get("DPSARNN_BACKEND", "ext"), numpy_kernels)


def available_backends():
    return sorted(_BACKENDS)


def use(name):
    """Switch the active kernel backend ('ext' or 'numpy')."""
    global active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    active = _BACKENDS[name]
    return active


def backend_name():
    return active.NAME


def kernels():
    """The currently active kernel module (reevaluated each call)."""
    return active
