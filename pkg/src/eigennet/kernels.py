"""Patch-extraction kernels for convolution as matrix multiplication.

These are the loop-heavy inner kernels of the package. By default they are
JIT-compiled with numba (nogil, so block workers can run them concurrently);
setting the environment variable EIGENNET_NO_NUMBA selects a pure-numpy
fallback path instead. ``benchmarks/bench_kernels.py`` compares the two.

Patch layout: one row per receptive field, fields ordered (batch, out_row,
out_col) row-major; within a row, values are channel-major then row-major
over the kernel window, i.e. column index = c*(kh*kw) + ki*kw + kj.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GeometryError

USE_NUMBA = not os.environ.get("EIGENNET_NO_NUMBA")
if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False


def conv_output_extent(size, k, stride, pad):
    """Output extent of a convolution axis; errors unless it is integral."""
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise GeometryError(
            f"kernel {k}, stride {stride}, pad {pad} does not tile extent {size}: "
            f"({size} + 2*{pad} - {k}) / {stride} is not a non-negative integer"
        )
    return span // stride + 1


def _pad_input(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col_numpy(xp, kh, kw, stride, oh, ow):
    b, c = xp.shape[:2]
    # windows: (b, c, oh, ow, kh, kw) strided view, then one gathering copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def _col2im_numpy(cols, xp_shape, kh, kw, stride, oh, ow):
    b, c, hp, wp = xp_shape
    g = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(xp_shape)
    for ki in range(kh):
        for kj in range(kw):
            # fixed kernel offset: strided destination cells are disjoint
            out[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += g[:, :, ki, kj]
    return out


if USE_NUMBA:

    @njit(cache=True, nogil=True)
    def _im2col_nb(xp, kh, kw, stride, oh, ow, cols):
        b, c = xp.shape[0], xp.shape[1]
        for n in range(b):
            for i in range(oh):
                for j in range(ow):
                    row = (n * oh + i) * ow + j
                    for ch in range(c):
                        base = ch * kh * kw
                        for ki in range(kh):
                            src = xp[n, ch, i * stride + ki]
                            for kj in range(kw):
                                cols[row, base + ki * kw + kj] = src[j * stride + kj]

    @njit(cache=True, nogil=True)
    def _col2im_nb(cols, kh, kw, stride, oh, ow, out):
        b, c = out.shape[0], out.shape[1]
        for n in range(b):
            for i in range(oh):
                for j in range(ow):
                    row = (n * oh + i) * ow + j
                    for ch in range(c):
                        base = ch * kh * kw
                        for ki in range(kh):
                            for kj in range(kw):
                                out[n, ch, i * stride + ki, j * stride + kj] += cols[row, base + ki * kw + kj]


def im2col_array(x, kh, kw, stride, pad):
    """Extract convolution patches from x[b,c,h,w] into a (b*oh*ow, c*kh*kw) matrix."""
    if x.ndim != 4:
        raise GeometryError(f"expected a b*c*h*w input, got rank {x.ndim}")
    b, c, h, w = x.shape
    oh = conv_output_extent(h, kh, stride, pad)
    ow = conv_output_extent(w, kw, stride, pad)
    xp = np.ascontiguousarray(_pad_input(x, pad))
    if USE_NUMBA:
        cols = np.empty((b * oh * ow, c * kh * kw))
        _im2col_nb(xp, kh, kw, stride, oh, ow, cols)
        return cols
    return _im2col_numpy(xp, kh, kw, stride, oh, ow)


def col2im_array(cols, x_shape, kh, kw, stride, pad):
    """Scatter-add patch gradients back to an input-shaped array (adjoint of im2col)."""
    b, c, h, w = x_shape
    oh = conv_output_extent(h, kh, stride, pad)
    ow = conv_output_extent(w, kw, stride, pad)
    cols = np.ascontiguousarray(cols)
    padded_shape = (b, c, h + 2 * pad, w + 2 * pad)
    if USE_NUMBA:
        out = np.zeros(padded_shape)
        _col2im_nb(cols, kh, kw, stride, oh, ow, out)
    else:
        out = _col2im_numpy(cols, padded_shape, kh, kw, stride, oh, ow)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)
