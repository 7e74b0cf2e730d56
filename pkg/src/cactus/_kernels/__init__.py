"""Convolution kernel backend selection.

The compiled Cython backend is preferred when its extension imports cleanly;
otherwise the numpy fallback is used. Setting CACTUS_PURE_PYTHON=1 forces the
fallback regardless of what is installed. `BACKEND` names the active choice
so callers (and the benchmark) can report it.
"""

import os

from . import conv_py

if os.environ.get("CACTUS_PURE_PYTHON", "") not in ("", "0"):
    _impl = conv_py
    BACKEND = "python"
else:
    try:
        from . import _conv_cy as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = conv_py
        BACKEND = "python"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_x = _impl.conv2d_backward_x
conv2d_backward_w = _impl.conv2d_backward_w

__all__ = ["BACKEND", "conv2d_forward", "conv2d_backward_x", "conv2d_backward_w", "conv_py"]
