"""Inner loops for the stereo operators.

Each kernel exists twice: a numba version (``*_nb``) and a vectorised numpy
version (``*_np``). The public names pick one according to
``segstereo._accel.USE_NUMBA``. Both are single-threaded with a fixed
accumulation order, so results are reproducible run to run.

Layouts are N-C-H-W. Correlation output is N-(D+1)-H-W.
"""
import numpy as np

from ._accel import USE_NUMBA, njit


# ---------------------------------------------------------------------------
# 1-D correlation: out[n, d, y, x] = mean_c left[n, c, y, x] * right[n, c, y, x - d]

@njit(cache=True)
def corr_forward_nb(left, right, max_disp):
    n_, c_, h_, w_ = left.shape
    out = np.zeros((n_, max_disp + 1, h_, w_), dtype=left.dtype)
    inv_c = 1.0 / c_
    for n in range(n_):
        for y in range(h_):
            for x in range(w_):
                for d in range(max_disp + 1):
                    xr = x - d
                    if xr < 0:
                        break
                    acc = 0.0
                    for c in range(c_):
                        acc += left[n, c, y, x] * right[n, c, y, xr]
                    out[n, d, y, x] = acc * inv_c
    return out


@njit(cache=True)
def corr_backward_nb(grad, left, right, max_disp):
    n_, c_, h_, w_ = left.shape
    gl = np.zeros_like(left)
    gr = np.zeros_like(right)
    inv_c = 1.0 / c_
    for n in range(n_):
        for y in range(h_):
            for x in range(w_):
                for d in range(max_disp + 1):
                    xr = x - d
                    if xr < 0:
                        break
                    g = grad[n, d, y, x] * inv_c
                    for c in range(c_):
                        gl[n, c, y, x] += g * right[n, c, y, xr]
                        gr[n, c, y, xr] += g * left[n, c, y, x]
    return gl, gr


def corr_forward_np(left, right, max_disp):
    n_, c_, h_, w_ = left.shape
    out = np.zeros((n_, max_disp + 1, h_, w_), dtype=left.dtype)
    for d in range(min(max_disp, w_ - 1) + 1):
        prod = left[..., d:] * right[..., : w_ - d]
        out[:, d, :, d:] = prod.sum(axis=1) / c_
    return out


def corr_backward_np(grad, left, right, max_disp):
    n_, c_, h_, w_ = left.shape
    gl = np.zeros_like(left)
    gr = np.zeros_like(right)
    for d in range(min(max_disp, w_ - 1) + 1):
        g = grad[:, d : d + 1, :, d:] / c_
        gl[..., d:] += g * right[..., : w_ - d]
        gr[..., : w_ - d] += g * left[..., d:]
    return gl, gr


# ---------------------------------------------------------------------------
# horizontal bilinear warp: out[n, c, y, x] = source sampled at (x - disp[n, 0, y, x], y)
#
# A sample position xs is valid iff 0 <= xs <= W - 1. The left tap is
# clamped to W - 2 so that xs == W - 1 reads the last column with weight 1.

@njit(cache=True)
def _taps_nb(disp, w_):
    # per-pixel left tap, fraction and validity; x0 is clamped so x0 + 1 < W
    n_, _, h_, _ = disp.shape
    x0 = np.zeros((n_, h_, w_), dtype=np.int64)
    frac = np.zeros((n_, h_, w_), dtype=np.float64)
    ok = np.zeros((n_, h_, w_), dtype=np.bool_)
    for n in range(n_):
        for y in range(h_):
            for x in range(w_):
                xs = x - disp[n, 0, y, x]
                if xs < 0.0 or xs > w_ - 1:
                    continue
                ok[n, y, x] = True
                if w_ == 1:
                    continue
                i = int(np.floor(xs))
                if i > w_ - 2:
                    i = w_ - 2
                x0[n, y, x] = i
                frac[n, y, x] = xs - i
    return x0, frac, ok


@njit(cache=True)
def warp_forward_nb(source, disp):
    n_, c_, h_, w_ = source.shape
    x0, frac, ok = _taps_nb(disp, w_)
    out = np.zeros_like(source)
    valid = np.zeros((n_, 1, h_, w_), dtype=source.dtype)
    for n in range(n_):
        for y in range(h_):
            for x in range(w_):
                if ok[n, y, x]:
                    valid[n, 0, y, x] = 1.0
        for c in range(c_):
            for y in range(h_):
                for x in range(w_):
                    if not ok[n, y, x]:
                        continue
                    i = x0[n, y, x]
                    if w_ == 1:
                        out[n, c, y, x] = source[n, c, y, 0]
                    else:
                        f = frac[n, y, x]
                        out[n, c, y, x] = (1.0 - f) * source[n, c, y, i] + f * source[n, c, y, i + 1]
    return out, valid


@njit(cache=True)
def warp_backward_nb(grad, source, disp):
    n_, c_, h_, w_ = source.shape
    x0, frac, ok = _taps_nb(disp, w_)
    gs = np.zeros_like(source)
    acc = np.zeros((n_, h_, w_), dtype=np.float64)
    for n in range(n_):
        for c in range(c_):
            for y in range(h_):
                for x in range(w_):
                    if not ok[n, y, x]:
                        continue
                    g = grad[n, c, y, x]
                    if w_ == 1:
                        gs[n, c, y, 0] += g
                        continue
                    i = x0[n, y, x]
                    f = frac[n, y, x]
                    gs[n, c, y, i] += (1.0 - f) * g
                    gs[n, c, y, i + 1] += f * g
                    if f == 0.0 or f == 1.0:
                        # average of the one-sided slopes; only one exists at the borders
                        k = i if f == 0.0 else i + 1
                        lo = k - 1 if k > 0 else k
                        hi = k + 1 if k < w_ - 1 else k
                        slope = (source[n, c, y, hi] - source[n, c, y, lo]) / (hi - lo)
                    else:
                        slope = source[n, c, y, i + 1] - source[n, c, y, i]
                    acc[n, y, x] += g * slope
    gd = np.zeros_like(disp)
    for n in range(n_):
        for y in range(h_):
            for x in range(w_):
                # d(xs)/d(disp) = -1
                gd[n, 0, y, x] = -acc[n, y, x]
    return gs, gd


def _warp_taps(disp, w_):
    xs = np.arange(w_, dtype=disp.dtype)[None, None, None, :] - disp
    valid = (xs >= 0) & (xs <= w_ - 1)
    if w_ == 1:
        x0 = np.zeros(xs.shape, dtype=np.int64)
        f = np.zeros_like(xs)
        return xs, valid, x0, x0, f
    x0 = np.clip(np.floor(np.where(valid, xs, 0)).astype(np.int64), 0, w_ - 2)
    f = np.where(valid, xs - x0, 0).astype(disp.dtype)
    return xs, valid, x0, x0 + 1, f


def warp_forward_np(source, disp):
    n_, c_, h_, w_ = source.shape
    _, valid, x0, x1, f = _warp_taps(disp, w_)
    shape = (n_, c_, h_, w_)
    s0 = np.take_along_axis(source, np.broadcast_to(x0, shape), axis=3)
    s1 = np.take_along_axis(source, np.broadcast_to(x1, shape), axis=3)
    out = np.where(valid, (1 - f) * s0 + f * s1, 0).astype(source.dtype)
    return out, valid.astype(source.dtype)


def warp_backward_np(grad, source, disp):
    n_, c_, h_, w_ = source.shape
    _, valid, x0, x1, f = _warp_taps(disp, w_)
    shape = (n_, c_, h_, w_)
    g = np.where(valid, grad, 0)
    gs = np.zeros_like(source)
    rows = np.arange(n_ * c_ * h_)[:, None] * w_
    flat = gs.reshape(-1)
    i0 = (rows + np.broadcast_to(x0, shape).reshape(n_ * c_ * h_, w_)).reshape(-1)
    i1 = (rows + np.broadcast_to(x1, shape).reshape(n_ * c_ * h_, w_)).reshape(-1)
    # bincount gives a fixed accumulation order, unlike np.add.at on floats
    flat += np.bincount(i0, weights=((1 - f) * g).reshape(-1), minlength=flat.size)
    flat += np.bincount(i1, weights=(f * g).reshape(-1), minlength=flat.size)
    if w_ == 1:
        return gs.astype(source.dtype), np.zeros_like(disp)

    s0 = np.take_along_axis(source, np.broadcast_to(x0, shape), axis=3)
    s1 = np.take_along_axis(source, np.broadcast_to(x1, shape), axis=3)
    slope = s1 - s0
    integer = (f == 0) | (f == 1)
    if integer.any():
        k = np.where(f == 0, x0, x1)
        lo = np.maximum(k - 1, 0)
        hi = np.minimum(k + 1, w_ - 1)
        slo = np.take_along_axis(source, np.broadcast_to(lo, shape), axis=3)
        shi = np.take_along_axis(source, np.broadcast_to(hi, shape), axis=3)
        central = (shi - slo) / np.maximum(hi - lo, 1)
        slope = np.where(integer, central, slope)
    gd = -(g * slope).sum(axis=1, keepdims=True)
    return gs.astype(source.dtype), np.where(valid, gd, 0).astype(disp.dtype)


if USE_NUMBA:
    corr_forward, corr_backward = corr_forward_nb, corr_backward_nb
    warp_forward, warp_backward = warp_forward_nb, warp_backward_nb
else:
    corr_forward, corr_backward = corr_forward_np, corr_backward_np
    warp_forward, warp_backward = warp_forward_np, warp_backward_np
