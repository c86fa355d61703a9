"""Stereo-specific operators: 1-D correlation cost volume and horizontal warping.

Convention: left pixel (x, y) matches right pixel (x - d, y), d >= 0.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import Tensor, record


def correlation1d(left_feat: Tensor, right_feat: Tensor, max_disp: int, pad: int | None = None) -> Tensor:
    """Cost volume of shape ``[N, max_disp + 1, H, W]``.

    ``out[n, d, y, x] = (1/C) * sum_c left[n, c, y, x] * right[n, c, y, x - d]``
    with the right map zero-padded on its left border; samples that fall off
    the image contribute zero.
    """
    if left_feat.shape != right_feat.shape:
        raise ValueError(f"feature shapes differ: {left_feat.shape} vs {right_feat.shape}")
    if left_feat.data.ndim != 4:
        raise ValueError("correlation1d expects N-C-H-W features")
    if max_disp < 0:
        raise ValueError(f"max_disp must be >= 0, got {max_disp}")
    if pad is not None and pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    # Output width stays W; any left pad only ever contributes zeros, so the
    # value of pad has no effect beyond validation.
    lf = np.ascontiguousarray(left_feat.data)
    rf = np.ascontiguousarray(right_feat.data)
    out = kernels.corr_forward(lf, rf, int(max_disp))

    def bw(g):
        return kernels.corr_backward(np.ascontiguousarray(g), lf, rf, int(max_disp))

    return record(out, (left_feat, right_feat), bw)


def warp_horizontal(source: Tensor, disparity: Tensor) -> tuple[Tensor, np.ndarray]:
    """Bilinearly resample ``source`` at ``(x - d, y)``.

    Returns the warped tensor and a ``[N, 1, H, W]`` validity mask (plain
    array, no gradient). Invalid outputs are exactly zero.
    """
    s, d = source.data, disparity.data
    if s.ndim != 4 or d.ndim != 4 or d.shape[1] != 1:
        raise ValueError("warp_horizontal expects source [N,C,H,W] and disparity [N,1,H,W]")
    if s.shape[0] != d.shape[0] or s.shape[2:] != d.shape[2:]:
        raise ValueError(f"resolution mismatch: source {s.shape} vs disparity {d.shape}")
    s = np.ascontiguousarray(s)
    d = np.ascontiguousarray(d.astype(s.dtype, copy=False))
    out, valid = kernels.warp_forward(s, d)

    def bw(g):
        return kernels.warp_backward(np.ascontiguousarray(g), s, d)

    return record(out, (source, disparity), bw), valid
