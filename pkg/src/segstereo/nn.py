"""Convolution, transposed convolution, concatenation, resizing, cross-entropy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, record


@dataclass
class ConvParams:
    """Kernel ``[out_ch, in_ch, kh, kw]`` (for deconv: ``[in_ch, out_ch, kh, kw]``)."""

    kernel: Tensor
    bias: Tensor | None = None
    stride: int = 1
    pad: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1 or self.pad < 0:
            raise ValueError(f"bad conv geometry stride={self.stride} pad={self.pad} dilation={self.dilation}")
        if self.kernel.data.ndim != 4:
            raise ValueError(f"kernel must be 4-D, got {self.kernel.shape}")


def conv_out_size(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dil: int) -> np.ndarray:
    # [C, kh, kw, N, Ho, Wo] built from kh*kw strided slices; this layout makes
    # the matmuls below operate on reshaped views without extra copies
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i * dil : i * dil + stride * (ho - 1) + 1 : stride,
                               j * dil : j * dil + stride * (wo - 1) + 1 : stride]
    return cols


def _scatter_windows(cols: np.ndarray, hp: int, wp: int, stride: int, dil: int) -> np.ndarray:
    # adjoint of _windows: cols [C, kh, kw, N, Ho, Wo] -> padded image [N, C, Hp, Wp]
    c, kh, kw, n, ho, wo = cols.shape
    xp = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i * dil : i * dil + stride * (ho - 1) + 1 : stride,
               j * dil : j * dil + stride * (wo - 1) + 1 : stride] += cols[:, i, j]
    return xp.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    return x[:, :, p : x.shape[2] - p, p : x.shape[3] - p] if p else x


def _channels_first(x: np.ndarray) -> np.ndarray:
    # [N, C, H, W] -> [C, N*H*W]
    n, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)


def _conv_raw(x: np.ndarray, w: np.ndarray, stride: int, pad: int, dil: int):
    o, c, kh, kw = w.shape
    n = x.shape[0]
    ho = conv_out_size(x.shape[2], kh, stride, pad, dil)
    wo = conv_out_size(x.shape[3], kw, stride, pad, dil)
    if ho < 1 or wo < 1:
        raise ValueError(f"degenerate conv output {ho}x{wo} for input {x.shape[2:]} and kernel {kh}x{kw}")
    cols = _windows(_pad(x, pad), kh, kw, ho, wo, stride, dil)
    out = w.reshape(o, -1) @ cols.reshape(c * kh * kw, -1)
    return out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3), cols


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_hw, stride: int, pad: int, dil: int) -> np.ndarray:
    # g [N, O, Ho, Wo], w [O, C, kh, kw] -> [N, C, H, W]
    o, c, kh, kw = w.shape
    n, _, ho, wo = g.shape
    gcols = (w.reshape(o, -1).T @ _channels_first(g)).reshape(c, kh, kw, n, ho, wo)
    hp, wp = in_hw[0] + 2 * pad, in_hw[1] + 2 * pad
    return _unpad(_scatter_windows(gcols, hp, wp, stride, dil), pad)


def _kernel_grad(g: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # g [N, O, Ho, Wo], cols [C, kh, kw, N, Ho, Wo] -> [O, C, kh, kw]
    c, kh, kw = cols.shape[:3]
    return (_channels_first(g) @ cols.reshape(c * kh * kw, -1).T).reshape(-1, c, kh, kw)


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlation with zero padding, stride and dilation."""
    w = params.kernel.data
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d expects N-C-H-W input, got {x.shape}")
    if xd.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input has {xd.shape[1]} channels, kernel expects {w.shape[1]}")
    s, p, dil = params.stride, params.pad, params.dilation
    out, cols = _conv_raw(xd, w, s, p, dil)
    b = params.bias
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gx = _conv_input_grad(g, w, xd.shape[2:], s, p, dil)
        gw = _kernel_grad(g, cols)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, params.kernel, b) if b is not None else (x, params.kernel)
    return record(out, inputs, bw)


def deconv_out_size(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n - 1) * stride - 2 * pad + dilation * (k - 1) + 1


def deconv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` in its input.

    The kernel is laid out ``[in_ch, out_ch, kh, kw]``: the same array that,
    passed to conv2d, maps out_ch channels to in_ch channels. With zero bias
    ``<conv2d(u, W), y> == <u, deconv2d(y, W)>``.
    """
    w = params.kernel.data
    yd = x.data
    if yd.ndim != 4:
        raise ValueError(f"deconv2d expects N-C-H-W input, got {x.shape}")
    if yd.shape[1] != w.shape[0]:
        raise ValueError(f"deconv2d: input has {yd.shape[1]} channels, kernel expects {w.shape[0]}")
    s, p, dil = params.stride, params.pad, params.dilation
    kh, kw = w.shape[2:]
    ho = deconv_out_size(yd.shape[2], kh, s, p, dil)
    wo = deconv_out_size(yd.shape[3], kw, s, p, dil)
    if ho < 1 or wo < 1 or conv_out_size(ho, kh, s, p, dil) != yd.shape[2] or conv_out_size(wo, kw, s, p, dil) != yd.shape[3]:
        raise ValueError(f"degenerate deconv geometry for input {yd.shape[2:]}")
    out = _conv_input_grad(yd, w, (ho, wo), s, p, dil)
    b = params.bias
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gy, gcols = _conv_raw(g, w, s, p, dil)
        # dW[i, o, kh, kw] = sum_{n, y, x} y[n, i, y, x] * windows(g)[o, kh, kw, n, y, x]
        gw = _kernel_grad(yd, gcols)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gy, gw, gb) if b is not None else (gy, gw)

    inputs = (x, params.kernel, b) if b is not None else (x, params.kernel)
    return record(out, inputs, bw)


def concat_channels(inputs: list[Tensor]) -> Tensor:
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for t in inputs:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: {t.shape} is incompatible with {ref}")
    if len(inputs) == 1:
        return inputs[0]
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=1)
    return record(out, tuple(inputs), lambda g: [g[:, a:b] for a, b in zip(bounds[:-1], bounds[1:])])


def interp_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation weights, shape ``[n_out, n_in]``."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    f = pos - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - f
    m[rows, i0 + 1] += f
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of an N-C-H-W tensor."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extents must be >= 1, got {out_h}x{out_w}")
    xd = x.data
    h, w = xd.shape[2:]
    if (h, w) == (out_h, out_w):
        return record(xd.copy(), (x,), lambda g: (g,))
    ry = interp_matrix(out_h, h, xd.dtype)
    rx = interp_matrix(out_w, w, xd.dtype)
    out = np.einsum("oh,nchw,pw->ncop", ry, xd, rx, optimize=True)
    return record(out, (x,), lambda g: (np.einsum("oh,ncop,pw->nchw", ry, g, rx, optimize=True),))


def nearest_indices(n_out: int, n_in: int) -> np.ndarray:
    """Nearest source index for the align-corners grid (used for label maps)."""
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out, dtype=np.int64)
    return np.rint(np.arange(n_out) * ((n_in - 1) / (n_out - 1))).astype(np.int64)


def resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of an integer ``[N, H, W]`` label map."""
    h, w = labels.shape[-2:]
    return labels[..., nearest_indices(out_h, h)[:, None], nearest_indices(out_w, w)[None, :]]


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_label: int = 255) -> Tensor:
    """Mean negative log-softmax over pixels whose label is not ``ignore_label``."""
    z = logits.data
    labels = np.asarray(labels)
    if z.ndim != 4 or labels.shape != (z.shape[0],) + z.shape[2:]:
        raise ValueError(f"labels {labels.shape} do not match logits {z.shape}")
    k = z.shape[1]
    valid = labels != ignore_label
    count = int(valid.sum())
    if count == 0:
        raise ValueError("softmax_cross_entropy: every pixel is ignored")
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"labels outside [0, {k}) found")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return ((p - onehot) * valid[:, None] * (g / count)).astype(z.dtype),

    return record(np.asarray(loss, dtype=z.dtype), (logits,), bw)
