"""Kernel backend selection.

Imports the compiled Cython core when available, else falls back to the
pure-numpy reference. Set DEFORMNVS_PURE_PYTHON=1 to force the fallback
(used by the parity tests and the benchmark).
"""

from __future__ import annotations

import os

from . import numpy_ref

if os.environ.get("DEFORMNVS_PURE_PYTHON", "0") == "1":
    _impl = numpy_ref
    BACKEND = "numpy"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = numpy_ref
        BACKEND = "numpy"

bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward
ea_forward = _impl.ea_forward
ea_backward = _impl.ea_backward

__all__ = [
    "BACKEND",
    "bilinear_forward",
    "bilinear_backward",
    "ea_forward",
    "ea_backward",
    "numpy_ref",
]
