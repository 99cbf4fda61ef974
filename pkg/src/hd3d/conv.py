"""Valid (unpadded), stride-1 3-D convolution and its adjoint.

Two algorithms compute the same cross-correlation::

    out[b, o, z, y, x] = bias[o] + sum_{c,i,j,k} x[b, c, z+i, y+j, x+k] * w[o, c, i, j, k]

``lowered``
    im2col: each sample's receptive fields are copied into a patch matrix of
    shape ``(C*k^3, D'*H'*W')`` and multiplied by the ``(O, C*k^3)`` kernel
    matrix.  BLAS-bound; the default.
``direct``
    explicit loops over the sum, compiled with numba.  With numba disabled
    the same sum is evaluated offset by offset (one GEMM per kernel tap).

The two must agree to within float rounding; ``tests/test_conv.py`` and the
benchmark script hold them to 1e-5 relative.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _accel
from .errors import KernelLargerThanInput, ShapeMismatch

METHODS = ("lowered", "direct")
DEFAULT_METHOD = os.environ.get("HD3D_CONV_METHOD", "lowered")


def _check(x, w, b=None):
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 5-D x and w, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"kernel expects {w.shape[1]} input channels, x has {x.shape[1]}")
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ShapeMismatch(f"kernel must be cubic with odd edge, got {w.shape[2:]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeMismatch(f"bias shape {b.shape} does not match {w.shape[0]} kernels")
    if any(s < k for s in x.shape[2:]):
        raise KernelLargerThanInput(f"kernel {k}^3 larger than input {x.shape[2:]}")
    return k


def out_shape(x_shape, w_shape):
    k = w_shape[2]
    return (x_shape[0], w_shape[0]) + tuple(s - k + 1 for s in x_shape[2:])


# -- lowered --------------------------------------------------------------

def _patch_matrix(xn, k):
    # xn: (C, D, H, W) -> (C*k^3, D'*H'*W')
    v = sliding_window_view(xn, (k, k, k), axis=(1, 2, 3))
    c = xn.shape[0]
    return v.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c * k ** 3, -1)


def _forward_lowered(x, w, b):
    B, C = x.shape[:2]
    O, k = w.shape[0], w.shape[2]
    shp = out_shape(x.shape, w.shape)
    out = np.empty(shp, dtype=x.dtype)
    wm = w.reshape(O, -1)
    for n in range(B):
        cols = x[n].reshape(C, -1) if k == 1 else _patch_matrix(x[n], k)
        om = out[n].reshape(O, -1)
        np.matmul(wm, cols, out=om)
        om += b[:, None]
    return out


def _backward_lowered(go, x, w):
    B, C = x.shape[:2]
    O, k = w.shape[0], w.shape[2]
    Do, Ho, Wo = go.shape[2:]
    wm = w.reshape(O, -1)
    gw = np.zeros(wm.shape, dtype=x.dtype)
    gx = np.zeros_like(x)
    gb = go.sum(axis=(0, 2, 3, 4))
    for n in range(B):
        gom = go[n].reshape(O, -1)
        if k == 1:
            gw += gom @ x[n].reshape(C, -1).T
            gx[n] = (wm.T @ gom).reshape(x.shape[1:])
            continue
        gw += gom @ _patch_matrix(x[n], k).T
        gcols = (wm.T @ gom).reshape(C, k, k, k, Do, Ho, Wo)
        gxn = gx[n]
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    gxn[:, i:i + Do, j:j + Ho, l:l + Wo] += gcols[:, i, j, l]
    return gx, gw.reshape(w.shape), gb


# -- direct ---------------------------------------------------------------

@_accel.optional_njit(cache=True)
def _forward_direct_nb(x, w, b, out):
    B, C = x.shape[0], x.shape[1]
    O, k = w.shape[0], w.shape[2]
    Do, Ho, Wo = out.shape[2], out.shape[3], out.shape[4]
    for n in range(B):
        for o in range(O):
            for z in range(Do):
                for y in range(Ho):
                    for xx in range(Wo):
                        out[n, o, z, y, xx] = b[o]
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            wv = w[o, c, i, j, l]
                            for z in range(Do):
                                for y in range(Ho):
                                    for xx in range(Wo):
                                        out[n, o, z, y, xx] += wv * x[n, c, z + i, y + j, xx + l]


@_accel.optional_njit(cache=True)
def _backward_direct_nb(go, x, w, gx, gw, gb):
    B, C = x.shape[0], x.shape[1]
    O, k = w.shape[0], w.shape[2]
    Do, Ho, Wo = go.shape[2], go.shape[3], go.shape[4]
    for n in range(B):
        for o in range(O):
            for z in range(Do):
                for y in range(Ho):
                    for xx in range(Wo):
                        gb[o] += go[n, o, z, y, xx]
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            wv = w[o, c, i, j, l]
                            acc = 0.0
                            for z in range(Do):
                                for y in range(Ho):
                                    for xx in range(Wo):
                                        g = go[n, o, z, y, xx]
                                        acc += g * x[n, c, z + i, y + j, xx + l]
                                        gx[n, c, z + i, y + j, xx + l] += g * wv
                            gw[o, c, i, j, l] += acc


def _forward_direct_np(x, w, b):
    B, C = x.shape[:2]
    O, k = w.shape[0], w.shape[2]
    shp = out_shape(x.shape, w.shape)
    Do, Ho, Wo = shp[2:]
    xt = np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4))
    om = np.zeros((O, B * Do * Ho * Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                xs = np.ascontiguousarray(xt[:, :, i:i + Do, j:j + Ho, l:l + Wo]).reshape(C, -1)
                om += np.ascontiguousarray(w[:, :, i, j, l]) @ xs
    om += b[:, None]
    return np.ascontiguousarray(om.reshape(O, B, Do, Ho, Wo).transpose(1, 0, 2, 3, 4))


def _backward_direct_np(go, x, w):
    B, C = x.shape[:2]
    O, k = w.shape[0], w.shape[2]
    Do, Ho, Wo = go.shape[2:]
    xt = np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4))
    gom = np.ascontiguousarray(go.transpose(1, 0, 2, 3, 4)).reshape(O, -1)
    gxt = np.zeros_like(xt)
    gw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                xs = np.ascontiguousarray(xt[:, :, i:i + Do, j:j + Ho, l:l + Wo]).reshape(C, -1)
                gw[:, :, i, j, l] = gom @ xs.T
                wo = np.ascontiguousarray(w[:, :, i, j, l])
                gxt[:, :, i:i + Do, j:j + Ho, l:l + Wo] += (wo.T @ gom).reshape(C, B, Do, Ho, Wo)
    gb = go.sum(axis=(0, 2, 3, 4))
    return np.ascontiguousarray(gxt.transpose(1, 0, 2, 3, 4)), gw, gb


def forward_direct(x, w, b, use_numba=None):
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    if not use_numba:
        return _forward_direct_np(x, w, b)
    out = np.empty(out_shape(x.shape, w.shape), dtype=x.dtype)
    _forward_direct_nb(np.ascontiguousarray(x), np.ascontiguousarray(w), b, out)
    return out


def backward_direct(go, x, w, use_numba=None):
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    if not use_numba:
        return _backward_direct_np(go, x, w)
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    gb = np.zeros(w.shape[0], dtype=x.dtype)
    _backward_direct_nb(np.ascontiguousarray(go), np.ascontiguousarray(x),
                        np.ascontiguousarray(w), gx, gw, gb)
    return gx, gw, gb


# -- public ---------------------------------------------------------------

def conv3d_forward(x, w, b, method=None):
    _check(x, w, b)
    method = method or DEFAULT_METHOD
    if method == "lowered":
        return _forward_lowered(np.ascontiguousarray(x), w, b)
    if method == "direct":
        return forward_direct(x, w, b)
    raise ValueError(f"unknown conv method {method!r}")


def conv3d_backward(grad_out, x, w, method=None):
    """Return ``(grad_x, grad_w, grad_b)`` for the forward call on ``x, w``."""
    _check(x, w)
    if grad_out.shape != out_shape(x.shape, w.shape):
        raise ShapeMismatch(
            f"grad_out {grad_out.shape} does not match forward output "
            f"{out_shape(x.shape, w.shape)}")
    method = method or DEFAULT_METHOD
    if method == "lowered":
        return _backward_lowered(np.ascontiguousarray(grad_out), np.ascontiguousarray(x), w)
    if method == "direct":
        return backward_direct(grad_out, x, w)
    raise ValueError(f"unknown conv method {method!r}")
