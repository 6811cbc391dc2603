"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The numba path is used when numba imports and ``SKDSSL_DISABLE_NUMBA`` is
unset (or ``0``).  Both paths compute the same thing; ``tests/test_kernels.py``
checks them against each other and ``benchmarks/bench_kernels.py`` times them.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _numba_requested():
    flag = os.environ.get("SKDSSL_DISABLE_NUMBA", "0").strip().lower()
    return flag in ("", "0", "false", "no")


HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and _numba_requested()


def backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def im2col_numpy(xp, kh, kw, stride, ho, wo):
    """Unfold padded ``(N, C, Hp, Wp)`` into ``(N*ho*wo, C*kh*kw)`` patches."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def col2im_numpy(cols, padded_shape, kh, kw, stride, ho, wo):
    n, c, hp, wp = padded_shape
    out = np.zeros(padded_shape, dtype=cols.dtype)
    patches = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += patches[:, :, i, j]
    return out


def maxpool_forward_numpy(x, k, stride):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward_numpy(grad, arg, x_shape, k, stride):
    n, c, ho, wo = grad.shape
    dx = np.zeros(x_shape, dtype=grad.dtype)
    di, dj = np.divmod(arg, k)
    rows = np.arange(ho)[None, None, :, None] * stride + di
    cols = np.arange(wo)[None, None, None, :] * stride + dj
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(dx, (nn, cc, rows, cols), grad)
    return dx


def crop_resize_numpy(img, top, left, height, width, out_h, out_w):
    """Bilinear resample of ``img[top:top+height, left:left+width]``.

    Half-pixel centers; sample coordinates are clamped to the crop box.
    """
    sy = height / out_h
    sx = width / out_w
    ys = np.clip((np.arange(out_h) + 0.5) * sy - 0.5, 0.0, height - 1) + top
    xs = np.clip((np.arange(out_w) + 0.5) * sx - 0.5, 0.0, width - 1) + left
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, top + height - 1)
    x1 = np.minimum(x0 + 1, left + width - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = img[y0[:, None], x0[None, :]]
    b = img[y0[:, None], x1[None, :]]
    c = img[y1[:, None], x0[None, :]]
    d = img[y1[:, None], x1[None, :]]
    top_row = a * (1.0 - wx) + b * wx
    bot_row = c * (1.0 - wx) + d * wx
    return top_row * (1.0 - wy) + bot_row * wy


def blur_numpy(img, kernel):
    r = kernel.shape[0] // 2
    p = np.pad(img, r, mode="reflect")
    h, w = img.shape
    tmp = np.zeros((h + 2 * r, w), dtype=np.float64)
    for t in range(kernel.shape[0]):
        tmp += kernel[t] * p[:, t : t + w]
    out = np.zeros((h, w), dtype=np.float64)
    for t in range(kernel.shape[0]):
        out += kernel[t] * tmp[t : t + h, :]
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def _im2col_nb(xp, kh, kw, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        out = np.empty((n * ho * wo, c * kh * kw), dtype=xp.dtype)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    col = 0
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                out[row, col] = xp[b, ch, i * stride + p, j * stride + q]
                                col += 1
        return out

    @_jit
    def _col2im_nb(cols, out, kh, kw, stride, ho, wo):
        n, c = out.shape[0], out.shape[1]
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    col = 0
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                out[b, ch, i * stride + p, j * stride + q] += cols[row, col]
                                col += 1
        return out

    @_jit
    def _maxpool_fwd_nb(x, k, stride, ho, wo):
        n, c = x.shape[0], x.shape[1]
        out = np.empty((n, c, ho, wo), dtype=x.dtype)
        arg = np.empty((n, c, ho, wo), dtype=np.int64)
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        best = x[b, ch, i * stride, j * stride]
                        best_t = 0
                        for p in range(k):
                            for q in range(k):
                                v = x[b, ch, i * stride + p, j * stride + q]
                                if v > best:
                                    best = v
                                    best_t = p * k + q
                        out[b, ch, i, j] = best
                        arg[b, ch, i, j] = best_t
        return out, arg

    @_jit
    def _maxpool_bwd_nb(grad, arg, dx, k, stride):
        n, c, ho, wo = grad.shape
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        t = arg[b, ch, i, j]
                        dx[b, ch, i * stride + t // k, j * stride + t % k] += grad[b, ch, i, j]
        return dx

    @_jit
    def _crop_resize_nb(img, top, left, height, width, out_h, out_w):
        out = np.empty((out_h, out_w), dtype=np.float64)
        sy = height / out_h
        sx = width / out_w
        for i in range(out_h):
            y = min(max((i + 0.5) * sy - 0.5, 0.0), height - 1.0) + top
            y0 = int(np.floor(y))
            y1 = min(y0 + 1, top + height - 1)
            wy = y - y0
            for j in range(out_w):
                x = min(max((j + 0.5) * sx - 0.5, 0.0), width - 1.0) + left
                x0 = int(np.floor(x))
                x1 = min(x0 + 1, left + width - 1)
                wx = x - x0
                upper = img[y0, x0] * (1.0 - wx) + img[y0, x1] * wx
                lower = img[y1, x0] * (1.0 - wx) + img[y1, x1] * wx
                out[i, j] = upper * (1.0 - wy) + lower * wy
        return out

    @_jit
    def _reflect(i, n):
        if i < 0:
            return -i
        if i >= n:
            return 2 * (n - 1) - i
        return i

    @_jit
    def _blur_nb(img, kernel):
        h, w = img.shape
        r = kernel.shape[0] // 2
        tmp = np.zeros((h, w), dtype=np.float64)
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for t in range(-r, r + 1):
                    acc += kernel[t + r] * img[i, _reflect(j + t, w)]
                tmp[i, j] = acc
        out = np.zeros((h, w), dtype=np.float64)
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for t in range(-r, r + 1):
                    acc += kernel[t + r] * tmp[_reflect(i + t, h), j]
                out[i, j] = acc
        return out

    def im2col_numba(xp, kh, kw, stride, ho, wo):
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)

    def col2im_numba(cols, padded_shape, kh, kw, stride, ho, wo):
        out = np.zeros(padded_shape, dtype=cols.dtype)
        return _col2im_nb(np.ascontiguousarray(cols), out, kh, kw, stride, ho, wo)

    def maxpool_forward_numba(x, k, stride):
        ho = (x.shape[2] - k) // stride + 1
        wo = (x.shape[3] - k) // stride + 1
        return _maxpool_fwd_nb(np.ascontiguousarray(x), k, stride, ho, wo)

    def maxpool_backward_numba(grad, arg, x_shape, k, stride):
        dx = np.zeros(x_shape, dtype=grad.dtype)
        return _maxpool_bwd_nb(np.ascontiguousarray(grad), arg, dx, k, stride)

    def crop_resize_numba(img, top, left, height, width, out_h, out_w):
        return _crop_resize_nb(np.ascontiguousarray(img, dtype=np.float64), top, left, height, width, out_h, out_w)

    def blur_numba(img, kernel):
        return _blur_nb(np.ascontiguousarray(img, dtype=np.float64), np.asarray(kernel, dtype=np.float64))


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_NUMPY = {
    "im2col": im2col_numpy,
    "col2im": col2im_numpy,
    "maxpool_forward": maxpool_forward_numpy,
    "maxpool_backward": maxpool_backward_numpy,
    "crop_resize": crop_resize_numpy,
    "blur": blur_numpy,
}
_NUMBA = (
    {
        "im2col": im2col_numba,
        "col2im": col2im_numba,
        "maxpool_forward": maxpool_forward_numba,
        "maxpool_backward": maxpool_backward_numba,
        "crop_resize": crop_resize_numba,
        "blur": blur_numba,
    }
    if HAVE_NUMBA
    else {}
)


def implementations(name):
    """Return ``{backend: fn}`` for a kernel, for cross-checks and benchmarks."""
    impls = {"numpy": _NUMPY[name]}
    if name in _NUMBA:
        impls["numba"] = _NUMBA[name]
    return impls


_ACTIVE = _NUMBA if USE_NUMBA else _NUMPY

im2col = _ACTIVE["im2col"]
col2im = _ACTIVE["col2im"]
maxpool_forward = _ACTIVE["maxpool_forward"]
maxpool_backward = _ACTIVE["maxpool_backward"]
crop_resize = _ACTIVE["crop_resize"]
blur = _ACTIVE["blur"]
