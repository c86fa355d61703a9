"""Mini semantic stereo matching on a small numpy autodiff engine.

Hot loops (correlation, horizontal warp) run through numba when it is
available; set ``SEGSTEREO_DISABLE_NUMBA=1`` to force the numpy versions.
"""
from ._accel import USE_NUMBA

__all__ = ["USE_NUMBA", "__version__"]
__version__ = "0.1.0"
