"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin.  Set ``GRAMREG_DISABLE_NUMBA=1`` before
import to force the numpy path (it is also used when numba cannot be
imported).  The im2col/col2im and Gram-matrix kernels accumulate in the same
order on both paths, so their results agree bitwise; the Gram gradient only
agrees to rounding.
"""

import os

import numpy as np

try:
    if os.environ.get("GRAMREG_DISABLE_NUMBA", "") not in ("", "0"):
        raise ImportError("numba disabled by GRAMREG_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# --- numpy path -------------------------------------------------------------

def im2col_numpy(x, kh, kw, stride):
    """(B, C, H, W) -> (B, C, kh, kw, OH, OW) patch tensor."""
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for ky in range(kh):
        ylim = ky + stride * oh
        for kx in range(kw):
            xlim = kx + stride * ow
            cols[:, :, ky, kx] = x[:, :, ky:ylim:stride, kx:xlim:stride]
    return cols


def col2im_numpy(cols, h, w, stride):
    b, c, kh, kw, oh, ow = cols.shape
    dx = np.zeros((b, c, h, w), dtype=cols.dtype)
    for ky in range(kh):
        ylim = ky + stride * oh
        for kx in range(kw):
            xlim = kx + stride * ow
            dx[:, :, ky:ylim:stride, kx:xlim:stride] += cols[:, :, ky, kx]
    return dx


def group_grams_numpy(w):
    """Per-position Gram matrices, shape (S, N, N), accumulated over channels in order."""
    n, c, s = w.shape
    g = np.zeros((s, n, n), dtype=w.dtype)
    for ch in range(c):
        v = w[:, ch, :].T  # (S, N)
        g += v[:, :, None] * v[:, None, :]
    return g


def kernel_gram_numpy(w):
    g = group_grams_numpy(w)
    k = np.zeros(g.shape[1:], dtype=w.dtype)
    for s in range(g.shape[0]):
        k += np.maximum(g[s], 0)
    return k


def gram_cross_grad_numpy(w):
    """Gradient of the ordered-pair off-diagonal sum of the kernel Gram matrix."""
    g = group_grams_numpy(w)
    mask = (g > 0).astype(w.dtype)
    idx = np.arange(w.shape[0])
    mask[:, idx, idx] = 0
    # grad[i, :, s] = 2 * sum_j mask[s, i, j] * w[j, :, s]
    return 2 * np.einsum("sij,jcs->ics", mask, w)


# --- numba path -------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, kh, kw, stride):
        b, c, h, w = x.shape
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
        for bi in range(b):
            for ci in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        for oy in range(oh):
                            for ox in range(ow):
                                cols[bi, ci, ky, kx, oy, ox] = x[bi, ci, ky + stride * oy, kx + stride * ox]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, h, w, stride):
        b, c, kh, kw, oh, ow = cols.shape
        dx = np.zeros((b, c, h, w), dtype=cols.dtype)
        for bi in range(b):
            for ci in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        for oy in range(oh):
                            for ox in range(ow):
                                dx[bi, ci, ky + stride * oy, kx + stride * ox] += cols[bi, ci, ky, kx, oy, ox]
        return dx

    @njit(cache=True)
    def _kernel_gram_nb(w):
        n, c, s = w.shape
        k = np.zeros((n, n), dtype=w.dtype)
        zero = k[0, 0]  # typed zero: float32 * int literal would promote to float64
        for i in range(n):
            for j in range(i, n):
                acc = k[i, j]
                for sp in range(s):
                    d = zero
                    for ch in range(c):
                        d += w[i, ch, sp] * w[j, ch, sp]
                    if d > 0:
                        acc += d
                k[i, j] = acc
                k[j, i] = acc
        return k

    @njit(cache=True)
    def _gram_cross_grad_nb(w):
        n, c, s = w.shape
        grad = np.zeros_like(w)
        zero = grad[0, 0, 0]
        for sp in range(s):
            for i in range(n):
                for j in range(i + 1, n):
                    d = zero
                    for ch in range(c):
                        d += w[i, ch, sp] * w[j, ch, sp]
                    if d > 0:
                        for ch in range(c):
                            grad[i, ch, sp] += w[j, ch, sp]
                            grad[j, ch, sp] += w[i, ch, sp]
        return 2 * grad

    def im2col(x, kh, kw, stride):
        return _im2col_nb(np.ascontiguousarray(x), kh, kw, stride)

    def col2im(cols, h, w, stride):
        return _col2im_nb(np.ascontiguousarray(cols), h, w, stride)

    def kernel_gram(w):
        return _kernel_gram_nb(np.ascontiguousarray(w))

    def gram_cross_grad(w):
        return _gram_cross_grad_nb(np.ascontiguousarray(w))

else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    kernel_gram = kernel_gram_numpy
    gram_cross_grad = gram_cross_grad_numpy
