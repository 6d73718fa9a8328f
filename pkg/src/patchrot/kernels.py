"""Convolution hot kernels.

Two interchangeable backends compute the same 2-D convolution (NCHW,
FCHW weights):

  - "numba": @njit parallel loops, filters innermost so the inner loop
    vectorizes.  Compiled once per dtype and cached on disk.
  - "numpy": im2col plus BLAS matmul, no compilation step.

``PATCHROT_BACKEND`` selects the default at import (numba when importable,
numpy otherwise); ``set_backend`` / the ``backend=`` argument override it
per call.  Each backend is run-to-run deterministic: every output element
is reduced in a fixed order by a single thread.  The two backends may
differ from each other in final-bit rounding.

``benchmarks/bench_kernels.py`` compares the two.
"""

import os

import numpy as np

from .errors import ShapeMismatchError

try:
    import numba
    from numba import njit, prange

    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


def _initial_backend() -> str:
    req = os.environ.get("PATCHROT_BACKEND", "auto").strip().lower()
    if req in ("", "auto"):
        return "numba" if HAS_NUMBA else "numpy"
    if req not in ("numba", "numpy"):
        raise ValueError(f"PATCHROT_BACKEND must be numba|numpy|auto, got {req!r}")
    if req == "numba" and not HAS_NUMBA:
        raise ValueError("PATCHROT_BACKEND=numba but numba is not importable")
    return req


_BACKEND = _initial_backend()


def get_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    _BACKEND = name


def _pad_nchw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    return xp


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(parallel=True, cache=True)
    def _nb_forward(xp, wt, stride, oh, ow):
        # xp: padded input (N, C, Hp, Wp); wt: weights as (C, KH, KW, F).
        # One thread owns one sample; per-sample accumulator is (OH, OW, F)
        # so the innermost loop runs contiguously over filters.
        n, c, hp, wp = xp.shape
        _, kh, kw, f = wt.shape
        out = np.empty((n, f, oh, ow), dtype=xp.dtype)
        for ni in prange(n):
            acc = np.zeros((oh, ow, f), dtype=xp.dtype)
            for ci in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        wrow = wt[ci, ki, kj]
                        for oi in range(oh):
                            xrow = xp[ni, ci, oi * stride + ki]
                            for oj in range(ow):
                                xv = xrow[oj * stride + kj]
                                arow = acc[oi, oj]
                                for fi in range(f):
                                    arow[fi] += xv * wrow[fi]
            for fi in range(f):
                for oi in range(oh):
                    for oj in range(ow):
                        out[ni, fi, oi, oj] = acc[oi, oj, fi]
        return out

    @njit(parallel=True, cache=True)
    def _nb_backward_weight(xp, dyt, kh, kw, stride):
        # xp (N, C, Hp, Wp), dyt (N, OH, OW, F) -> dwt (C, KH, KW, F).
        # Each (ci) slab is owned by one thread: no write races, fixed
        # reduction order.
        n, c, hp, wp = xp.shape
        _, oh, ow, f = dyt.shape
        dwt = np.zeros((c, kh, kw, f), dtype=xp.dtype)
        for ci in prange(c):
            for ki in range(kh):
                for kj in range(kw):
                    drow = dwt[ci, ki, kj]
                    for ni in range(n):
                        for oi in range(oh):
                            xrow = xp[ni, ci, oi * stride + ki]
                            for oj in range(ow):
                                xv = xrow[oj * stride + kj]
                                g = dyt[ni, oi, oj]
                                for fi in range(f):
                                    drow[fi] += xv * g[fi]
        return dwt

    @njit(parallel=True, cache=True, fastmath=True)
    def _nb_backward_input(dyt, wt, n, c, hp, wp, stride):
        # dyt (N, OH, OW, F), wt (C, KH, KW, F) -> padded input grad.
        # One thread owns one sample.  fastmath lets the filter-axis
        # reduction vectorize; the compiled order is fixed, so results
        # stay run-to-run deterministic.
        _, oh, ow, f = dyt.shape
        _, kh, kw, _ = wt.shape
        dxp = np.zeros((n, c, hp, wp), dtype=dyt.dtype)
        for ni in prange(n):
            for oi in range(oh):
                for oj in range(ow):
                    g = dyt[ni, oi, oj]
                    for ci in range(c):
                        for ki in range(kh):
                            row = dxp[ni, ci, oi * stride + ki]
                            for kj in range(kw):
                                wrow = wt[ci, ki, kj]
                                jj = oj * stride + kj
                                s = row[jj]
                                for fi in range(f):
                                    s += g[fi] * wrow[fi]
                                row[jj] = s
        return dxp


def _numba_forward(x, w, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(wd, kw, stride, pad)
    xp = _pad_nchw(x, pad)
    wt = np.ascontiguousarray(w.transpose(1, 2, 3, 0))
    y = _nb_forward(xp, wt, stride, oh, ow)
    ctx = ("numba", xp, wt, x.shape, stride, pad)
    return y, ctx


def _numba_backward(ctx, dy, need_dx=True, need_dw=True):
    _, xp, wt, x_shape, stride, pad = ctx
    n, c, h, wd = x_shape
    kh, kw = wt.shape[1], wt.shape[2]
    dyt = np.ascontiguousarray(dy.transpose(0, 2, 3, 1))
    dx = dw = None
    if need_dw:
        dwt = _nb_backward_weight(xp, dyt, kh, kw, stride)
        dw = np.ascontiguousarray(dwt.transpose(3, 0, 1, 2))
    if need_dx:
        dxp = _nb_backward_input(dyt, wt, n, c, xp.shape[2], xp.shape[3], stride)
        dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        dx = np.ascontiguousarray(dx)
    return dx, dw


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _im2col(x, kh, kw, stride, pad):
    # Column layout (C, KH, KW, N, OH, OW): reshaping to the GEMM operand
    # (C*KH*KW, N*OH*OW) is then free.
    xp = _pad_nchw(x, pad)
    n, c = x.shape[:2]
    oh = conv_out_size(x.shape[2], kh, stride, pad)
    ow = conv_out_size(x.shape[3], kw, stride, pad)
    col = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    xpt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            col[:, i, j] = xpt[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
    return col, oh, ow


def _numpy_forward(x, w, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    col, oh, ow = _im2col(x, kh, kw, stride, pad)
    colf = col.reshape(c * kh * kw, n * oh * ow)
    y = w.reshape(f, -1) @ colf
    y = np.ascontiguousarray(y.reshape(f, n, oh, ow).transpose(1, 0, 2, 3))
    ctx = ("numpy", colf, w, x.shape, stride, pad, (oh, ow))
    return y, ctx


def _numpy_backward(ctx, dy, need_dx=True, need_dw=True):
    _, colf, w, x_shape, stride, pad, (oh, ow) = ctx
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    dyf = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(f, n * oh * ow)
    dx = dw = None
    if need_dw:
        dw = (dyf @ colf.T).reshape(f, c, kh, kw)
    if need_dx:
        dcol = (w.reshape(f, -1).T @ dyf).reshape(c, kh, kw, n, oh, ow)
        dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dy.dtype)
        dxpt = dxp.transpose(1, 0, 2, 3)
        for i in range(kh):
            for j in range(kw):
                dxpt[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += dcol[:, i, j]
        dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        dx = np.ascontiguousarray(dx)
    return dx, dw


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def conv2d_forward(x, w, stride=1, pad=0, backend=None):
    """y = conv(x, w); returns (y, ctx) where ctx feeds conv2d_backward."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(
            f"conv2d needs NCHW input and FCHW weight with matching C, got {x.shape} and {w.shape}"
        )
    if x.shape[2] + 2 * pad < w.shape[2] or x.shape[3] + 2 * pad < w.shape[3]:
        raise ShapeMismatchError(f"kernel {w.shape[2:]} larger than padded input")
    if (backend or _BACKEND) == "numba":
        return _numba_forward(x, w, stride, pad)
    return _numpy_forward(x, w, stride, pad)


def conv2d_backward(ctx, dy, need_dx=True, need_dw=True):
    """Gradients (dx, dw) for the forward call that produced ctx."""
    if ctx[0] == "numba":
        return _numba_backward(ctx, dy, need_dx, need_dw)
    return _numpy_backward(ctx, dy, need_dx, need_dw)
