"""Semi-supervised stereo depth learning at desk scale."""

__version__ = "0.1.0"

from depthforge.kernels import BACKEND as kernel_backend  # noqa: F401
