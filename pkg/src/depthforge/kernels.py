"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy fallback is
always available. Set DEPTHFORGE_PURE_PYTHON=1 to force the fallback (used
by the backend-parity tests and the kernel benchmark).
"""

import os

from depthforge import _kernels_np

if os.environ.get("DEPTHFORGE_PURE_PYTHON"):
    _impl = _kernels_np
else:
    try:
        from depthforge import _kernels_cy as _impl
    except ImportError:
        _impl = _kernels_np

BACKEND = _impl.BACKEND_NAME

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
