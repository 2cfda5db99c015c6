"""Kernel backend selection.

The compiled extension is preferred when present; the numpy fallback is
behaviorally identical (values agree to rounding, pooling indices exactly).
Set BHMAML_KERNELS=python or =cython to force a backend.
"""

import os

from . import reference as _py

_choice = os.environ.get("BHMAML_KERNELS", "auto").lower()

if _choice == "python":
    _impl = _py
elif _choice == "cython":
    from . import _fastcore as _impl  # hard failure if forced but not built
else:
    try:
        from . import _fastcore as _impl
    except ImportError:
        _impl = _py

BACKEND = _impl.BACKEND
conv3x3_forward = _impl.conv3x3_forward
conv3x3_backward = _impl.conv3x3_backward
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward


def backend() -> str:
    """Name of the active kernel backend ('cython' or 'python')."""
    return BACKEND
