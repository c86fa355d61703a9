"""Photometric, smoothness, semantic and regression losses plus their weighted totals."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import ConvParams, bilinear_resize, conv2d, resize_labels, softmax_cross_entropy
from .stereo import warp_horizontal
from .tensor import Tensor, record


@dataclass
class LossWeights:
    lambda_p: float = 1.0
    lambda_s: float = 0.1
    lambda_seg: float = 10.0
    lambda_r: float = 1.0
    photometric_threshold: float = 10.0
    charbonnier_alpha: float = 0.21
    charbonnier_beta: float = 5.0
    charbonnier_eps: float = 0.001

    def __post_init__(self):
        for name in ("lambda_p", "lambda_s", "lambda_seg", "lambda_r"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def charbonnier(self) -> tuple[float, float, float]:
        return self.charbonnier_alpha, self.charbonnier_beta, self.charbonnier_eps

    @classmethod
    def unsupervised(cls, **kw) -> "LossWeights":
        return cls(**{"lambda_p": 1.0, "lambda_seg": 10.0, "lambda_s": 0.1, **kw})

    @classmethod
    def supervised(cls, **kw) -> "LossWeights":
        return cls(**{"lambda_r": 1.0, "lambda_seg": 1.0, "lambda_s": 0.1, **kw})


@dataclass
class LossReport:
    total: float
    photometric: float | None = None
    smoothness: float | None = None
    semantic: float | None = None
    regression: float | None = None
    masked_fraction: float | None = None
    weights: dict = field(default_factory=dict)

    def items(self):
        for name in ("photometric", "smoothness", "semantic", "regression"):
            v = getattr(self, name)
            if v is not None:
                yield name, v

    def reconstruct_total(self) -> float:
        return sum(self.weights[name] * v for name, v in self.items())


def photometric_loss(warped: Tensor, target: Tensor, validity, threshold: float = 10.0,
                     return_mask: bool = False):
    """Thresholded L1 reconstruction error, averaged over all N pixels.

    The per-pixel residual is the channel sum of absolute differences. Pixels
    with residual above ``threshold`` or zero validity are dropped; the mask
    itself carries no gradient.
    """
    if warped.shape != target.shape:
        raise ValueError(f"photometric_loss: {warped.shape} vs {target.shape}")
    n, c, h, w = warped.shape
    diff = T.abs_(T.sub(warped, target))
    per_pixel = channel_sum(diff)
    valid = np.asarray(validity.data if isinstance(validity, Tensor) else validity)
    valid = np.broadcast_to(valid, per_pixel.shape)
    delta = ((per_pixel.data <= threshold) & (valid > 0)).astype(warped.dtype)
    loss = T.mean(per_pixel, mask=delta)
    if return_mask:
        return loss, delta
    return loss


def channel_sum(x: Tensor) -> Tensor:
    """Sum over the channel axis, keeping it as size 1."""
    xd = x.data
    shape = xd.shape
    return record(xd.sum(axis=1, keepdims=True), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def charbonnier(x: np.ndarray, alpha: float, beta: float, eps: float) -> np.ndarray:
    return ((beta * x) ** 2 + eps ** 2) ** alpha


def smoothness_loss(disparity: Tensor, charbonnier_params=(0.21, 5.0, 0.001)) -> Tensor:
    """Generalised Charbonnier penalty on vertical and horizontal disparity differences.

    Normalised by the total pixel count; edge pixels without a neighbour in a
    direction contribute nothing in that direction.
    """
    alpha, beta, eps = charbonnier_params
    d = disparity.data
    if d.ndim != 4 or (d.shape[2] < 2 and d.shape[3] < 2):
        raise ValueError(f"smoothness_loss needs an N-1-H-W map larger than 1x1, got {disparity.shape}")
    n_total = d.size
    dy = d[:, :, :-1, :] - d[:, :, 1:, :]
    dx = d[:, :, :, :-1] - d[:, :, :, 1:]
    val = (charbonnier(dy, alpha, beta, eps).sum() + charbonnier(dx, alpha, beta, eps).sum()) / n_total

    def bw(g):
        def dpen(x):
            return alpha * ((beta * x) ** 2 + eps ** 2) ** (alpha - 1) * 2 * beta * beta * x

        gy = dpen(dy) * (g / n_total)
        gx = dpen(dx) * (g / n_total)
        out = np.zeros_like(d)
        out[:, :, :-1, :] += gy
        out[:, :, 1:, :] -= gy
        out[:, :, :, :-1] += gx
        out[:, :, :, 1:] -= gx
        return (out,)

    return record(np.asarray(val, dtype=d.dtype), (disparity,), bw)


def semantic_loss(right_sem_feat: Tensor, disparity: Tensor, classifier: ConvParams,
                  left_labels: np.ndarray, ignore_label: int = 255) -> Tensor:
    """Warp right semantic features into the left view and classify them.

    Features are upsampled to the disparity resolution, warped, downsampled
    back, classified with a 1x1 conv and scored against the left labels
    (nearest-neighbour downsampled).
    """
    n, c, h, w = right_sem_feat.shape
    dh, dw = disparity.shape[2:]
    labels = np.asarray(left_labels)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.shape != (n, dh, dw):
        raise ValueError(f"label map {labels.shape} does not match disparity {disparity.shape}")
    if dh != 8 * h or dw != 8 * w:
        raise ValueError(f"label/disparity resolution {dh}x{dw} must be 8x the feature map {h}x{w}")
    up = bilinear_resize(right_sem_feat, dh, dw)
    warped, _ = warp_horizontal(up, disparity)
    down = bilinear_resize(warped, h, w)
    logits = conv2d(down, classifier)
    return softmax_cross_entropy(logits, resize_labels(labels, h, w), ignore_label)


def regression_loss(disparity: Tensor, gt, valid) -> Tensor:
    """Mean absolute error over valid ground-truth pixels (divides by the valid count)."""
    g = np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    v = np.asarray(valid.data if isinstance(valid, Tensor) else valid).astype(bool)
    if g.shape != disparity.shape or v.shape != disparity.shape:
        raise ValueError(f"regression_loss: shapes {disparity.shape}, {g.shape}, {v.shape}")
    n_valid = int(v.sum())
    if n_valid == 0:
        raise ValueError("regression_loss: no valid ground-truth pixels")
    d = disparity.data
    r = np.where(v, d - g, 0)
    val = np.abs(r).sum() / n_valid
    return record(np.asarray(val, dtype=d.dtype), (disparity,),
                  lambda gr: ((np.sign(r) * (gr / n_valid)).astype(d.dtype),))


def total_loss(mode: str, weights: LossWeights, *, photometric: Tensor | None = None,
               smoothness: Tensor | None = None, semantic: Tensor | None = None,
               regression: Tensor | None = None, masked_fraction: float | None = None):
    """Weighted sum for ``mode`` in {"unsupervised", "supervised"}.

    Returns ``(total_tensor, LossReport)``. A missing semantic term means no
    labels were available and its weight is treated as zero.
    """
    if mode == "unsupervised":
        primary = ("photometric", photometric, weights.lambda_p)
    elif mode == "supervised":
        primary = ("regression", regression, weights.lambda_r)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if primary[1] is None:
        raise ValueError(f"{mode} loss requires the {primary[0]} term")
    if smoothness is None:
        raise ValueError(f"{mode} loss requires the smoothness term")
    terms = [primary, ("smoothness", smoothness, weights.lambda_s)]
    if semantic is not None:
        terms.append(("semantic", semantic, weights.lambda_seg))

    total = None
    for _, t, wgt in terms:
        part = T.scale(t, wgt)
        total = part if total is None else T.add(total, part)
    report = LossReport(total=total.item(), masked_fraction=masked_fraction,
                        weights={name: float(wgt) for name, _, wgt in terms})
    for name, t, _ in terms:
        setattr(report, name, t.item())
    return total, report
