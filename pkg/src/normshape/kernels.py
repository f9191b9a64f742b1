"""3D convolution primitives (batched, channels-first).

Three primitives cover forward and backward of both conv3d and its
transpose:

  conv3d_forward           x (N,C,D,H,W), w (O,C,k,k,k) -> (N,O,D',H',W')
  conv3d_weight_grad       kernel gradient, summed over the batch
  conv3d_transpose_forward the exact linear adjoint of conv3d_forward

Each has a numba build and a numpy (im2col / strided-scatter) build. The
im2col path rides BLAS and wins on typical hosts, so it is the default;
set NORMSHAPE_CONV=direct to force the numba direct-loop kernels instead
(see benchmarks/bench_kernels.py for the comparison). NORMSHAPE_NUMBA=0
disables numba entirely.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USE_NUMBA, maybe_njit, prange

CONV_DIRECT = USE_NUMBA and os.environ.get("NORMSHAPE_CONV", "im2col") == "direct"


def conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def tconv_out_extent(n: int, k: int, stride: int, pad: int, outpad: int) -> int:
    return (n - 1) * stride - 2 * pad + k + outpad


# ---------------------------------------------------------------------------
# numpy path: im2col + BLAS matmul
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """(C, D, H, W) -> (C*k^3, M) column matrix of receptive fields.

    Per-sample on purpose: one sample's columns stay cache-resident, which
    beats one huge batched matrix on memory bandwidth.
    """
    c = x.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    out_sp = win.shape[1:4]
    cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c * k**3, int(np.prod(out_sp)))
    return np.ascontiguousarray(cols), out_sp


def _conv3d_forward_np(x, w, stride, pad):
    n, c = x.shape[:2]
    o, k = w.shape[0], w.shape[2]
    wmat = w.reshape(o, c * k**3)
    out = None
    for b in range(n):
        cols, out_sp = _im2col(x[b], k, stride, pad)
        if out is None:
            out = np.empty((n, o, *out_sp), dtype=x.dtype)
        out[b] = (wmat @ cols).reshape(o, *out_sp)
    return out


def _conv3d_weight_grad_np(x, gout, k, stride, pad):
    n, c = x.shape[:2]
    o = gout.shape[1]
    gw = np.zeros((o, c * k**3), dtype=x.dtype)
    for b in range(n):
        cols, _ = _im2col(x[b], k, stride, pad)
        gw += gout[b].reshape(o, -1) @ cols.T
    return gw.reshape(o, c, k, k, k)


def _conv3d_transpose_forward_np(y, w, stride, pad, outpad):
    if stride == 1 and all(op == 0 for op in outpad):
        # adjoint of a stride-1 conv == conv with the flipped, channel-swapped
        # kernel at pad k-1-p; keeps everything on the matmul path
        k = w.shape[2]
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].swapaxes(0, 1))
        return _conv3d_forward_np(y, wf, 1, k - 1 - pad)
    n = y.shape[0]
    o, c, k = w.shape[0], w.shape[1], w.shape[2]
    dy, hy, wy = y.shape[2:]
    m = dy * hy * wy
    wt = w.reshape(o, c * k**3).T
    full_sp = [(e - 1) * stride + k + op for e, op in zip((dy, hy, wy), outpad)]
    out_sp = [fs - 2 * pad for fs in full_sp]
    out = np.empty((n, c, *out_sp), dtype=y.dtype)
    s = stride
    sl = tuple(slice(pad, fs - pad) for fs in full_sp)
    for b in range(n):
        tmp = (wt @ y[b].reshape(o, m)).reshape(c, k, k, k, dy, hy, wy)
        full = np.zeros((c, *full_sp), dtype=y.dtype)
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    full[:, i : i + s * dy : s, j : j + s * hy : s, l : l + s * wy : s] += tmp[
                        :, i, j, l
                    ]
        out[b] = full[(slice(None),) + sl]
    return out


# ---------------------------------------------------------------------------
# numba path: direct loops over a single sample; wrappers loop the batch
# ---------------------------------------------------------------------------

@maybe_njit(parallel=True)
def _conv3d_forward_nb(xp, w, stride, do, ho, wo):  # pragma: no cover
    O, C, k = w.shape[0], w.shape[1], w.shape[2]
    out = np.zeros((O, do, ho, wo), dtype=xp.dtype)
    for o in prange(O):
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        wv = w[o, c, i, j, l]
                        for d in range(do):
                            for h in range(ho):
                                row = xp[c, d * stride + i, h * stride + j]
                                for t in range(wo):
                                    out[o, d, h, t] += wv * row[t * stride + l]
    return out


@maybe_njit(parallel=True)
def _conv3d_weight_grad_nb(xp, gout, stride, k):  # pragma: no cover
    O = gout.shape[0]
    C = xp.shape[0]
    do, ho, wo = gout.shape[1], gout.shape[2], gout.shape[3]
    gw = np.zeros((O, C, k, k, k), dtype=xp.dtype)
    for o in prange(O):
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        acc = 0.0
                        for d in range(do):
                            for h in range(ho):
                                g = gout[o, d, h]
                                row = xp[c, d * stride + i, h * stride + j]
                                for t in range(wo):
                                    acc += g[t] * row[t * stride + l]
                        gw[o, c, i, j, l] = acc
    return gw


@maybe_njit(parallel=True)
def _conv3d_transpose_forward_nb(y, w, stride, pad, dx, hx, wx):  # pragma: no cover
    O, C, k = w.shape[0], w.shape[1], w.shape[2]
    dy, hy, wy = y.shape[1], y.shape[2], y.shape[3]
    out = np.zeros((C, dx, hx, wx), dtype=y.dtype)
    for c in prange(C):
        for du in range(dx):
            for i in range(k):
                zi = du + pad - i
                if zi < 0 or zi % stride != 0 or zi // stride >= dy:
                    continue
                sd = zi // stride
                for hu in range(hx):
                    for j in range(k):
                        zj = hu + pad - j
                        if zj < 0 or zj % stride != 0 or zj // stride >= hy:
                            continue
                        sh = zj // stride
                        for wu in range(wx):
                            acc = 0.0
                            for l in range(k):
                                zl = wu + pad - l
                                if zl < 0 or zl % stride != 0 or zl // stride >= wy:
                                    continue
                                sw = zl // stride
                                for o in range(O):
                                    acc += w[o, c, i, j, l] * y[o, sd, sh, sw]
                            out[c, du, hu, wu] += acc
    return out


# ---------------------------------------------------------------------------
# public wrappers (batched)
# ---------------------------------------------------------------------------

def conv3d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """x (N,C,D,H,W), w (O,C,k,k,k) -> (N,O,D',H',W')."""
    if CONV_DIRECT:
        k = w.shape[2]
        do, ho, wo = (conv_out_extent(n, k, stride, pad) for n in x.shape[2:])
        out = np.empty((x.shape[0], w.shape[0], do, ho, wo), dtype=x.dtype)
        for b in range(x.shape[0]):
            xp = np.pad(x[b], ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
            out[b] = _conv3d_forward_nb(xp, w, stride, do, ho, wo)
        return out
    return _conv3d_forward_np(x, w, stride, pad)


def conv3d_weight_grad(
    x: np.ndarray, gout: np.ndarray, k: int, stride: int, pad: int
) -> np.ndarray:
    """Gradient of sum-loss wrt the kernel, accumulated over the batch."""
    if CONV_DIRECT:
        gw = np.zeros((gout.shape[1], x.shape[1], k, k, k), dtype=x.dtype)
        for b in range(x.shape[0]):
            xp = np.pad(x[b], ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
            gw += _conv3d_weight_grad_nb(xp, gout[b], stride, k)
        return gw
    return _conv3d_weight_grad_np(x, gout, k, stride, pad)


def conv3d_transpose_forward(
    y: np.ndarray, w: np.ndarray, stride: int, pad: int, outpad
) -> np.ndarray:
    """y (N,O,Dy,Hy,Wy), w (O,C,k,k,k) -> (N,C,Dx,Hx,Wx); adjoint of conv3d_forward."""
    if isinstance(outpad, int):
        outpad = (outpad, outpad, outpad)
    if CONV_DIRECT:
        k = w.shape[2]
        dx, hx, wx = (
            tconv_out_extent(n, k, stride, pad, op) for n, op in zip(y.shape[2:], outpad)
        )
        out = np.empty((y.shape[0], w.shape[1], dx, hx, wx), dtype=y.dtype)
        for b in range(y.shape[0]):
            out[b] = _conv3d_transpose_forward_nb(y[b], w, stride, pad, dx, hx, wx)
        return out
    return _conv3d_transpose_forward_np(y, w, stride, pad, outpad)
