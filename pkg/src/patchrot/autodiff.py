"""Reverse-mode autodiff over dense float tensors.

A ``Tape`` records one forward pass; ``tape.backward(loss)`` replays the
record in exact reverse order, accumulating gradients into every tensor
that requires them.  Ops are plain functions; outside an active tape they
run forward-only with no recording overhead.

Tensors default to float32.  float64 is accepted so numerical oracles can
re-run the same graph in higher precision.  Every op output and every
accumulated gradient is checked for NaN/Inf (a cheap sum probe: any
non-finite element makes the float64 sum non-finite).

Hot convolution loops live in ``kernels`` (numba or numpy backend).
"""

import math

import numpy as np

from . import kernels
from .errors import (
    NonFiniteValueError,
    NotScalarError,
    ShapeMismatchError,
    TapeConsumedError,
)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = np.ascontiguousarray(arr) if arr.ndim else arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


_ACTIVE_TAPE = None


class Tape:
    """Execution-ordered record of one forward pass."""

    def __init__(self):
        self._records = []  # (out_tensor, backward_fn)
        self._touched = []
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _record(self, out, backward_fn):
        self._records.append((out, backward_fn))

    def backward(self, loss):
        """Populate grads of everything reachable from the scalar loss.

        Records are replayed in exact reverse execution order (a valid
        reverse topological order).  A tape can be walked once.
        """
        if loss.data.size != 1:
            raise NotScalarError(f"loss has shape {loss.data.shape}, expected a scalar")
        if self._consumed:
            raise TapeConsumedError("backward() already ran on this tape; re-run forward")
        if not self._records:
            raise TapeConsumedError("tape is empty; nothing was recorded")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            if out.grad is None:  # not reachable from the loss
                continue
            fn(out.grad)
        for t in self._touched:
            _check_finite(t.grad, "backward")


def _check_finite(arr, op):
    # fast probe: a non-finite element makes the self-dot non-finite; the
    # probe can also overflow on huge finite values, so confirm exactly
    # before raising
    flat = arr.ravel()
    if not math.isfinite(float(np.dot(flat, flat))) and not np.isfinite(arr).all():
        raise NonFiniteValueError(f"non-finite values produced by {op}")


def _make_out(data, op, inputs):
    """Wrap op output; record on the active tape when gradients are needed."""
    _check_finite(data, op)
    out = Tensor(data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        return out, tape
    return out, None


def _accum(tape, t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        g = np.asarray(g, dtype=t.data.dtype)
        t.grad = np.ascontiguousarray(g) if g.ndim else g
        tape._touched.append(t)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"add: {a.data.shape} vs {b.data.shape}")
    out, tape = _make_out(a.data + b.data, "add", (a, b))
    if tape:
        def bwd(dy):
            _accum(tape, a, dy)
            _accum(tape, b, dy)
        tape._record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"mul: {a.data.shape} vs {b.data.shape}")
    out, tape = _make_out(a.data * b.data, "mul", (a, b))
    if tape:
        def bwd(dy):
            _accum(tape, a, dy * b.data)
            _accum(tape, b, dy * a.data)
        tape._record(out, bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out, tape = _make_out(a.data @ b.data, "matmul", (a, b))
    if tape:
        def bwd(dy):
            _accum(tape, a, dy @ b.data.T)
            _accum(tape, b, a.data.T @ dy)
        tape._record(out, bwd)
    return out


def relu(x: Tensor) -> Tensor:
    out, tape = _make_out(np.maximum(x.data, 0), "relu", (x,))
    if tape:
        mask = x.data > 0
        def bwd(dy):
            _accum(tape, x, dy * mask)
        tape._record(out, bwd)
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D convolution, NCHW input, FCHW weight, no bias.

    padding "same" keeps spatial dims at stride 1 (odd kernels); "valid"
    applies no padding.
    """
    if padding == "same":
        pad = (w.data.shape[2] - 1) // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    y, ctx = kernels.conv2d_forward(x.data, w.data, stride=stride, pad=pad)
    out, tape = _make_out(y, "conv2d", (x, w))
    if tape:
        def bwd(dy):
            dx, dw = kernels.conv2d_backward(
                ctx, np.ascontiguousarray(dy),
                need_dx=x.requires_grad, need_dw=w.requires_grad,
            )
            if dx is not None:
                _accum(tape, x, dx)
            if dw is not None:
                _accum(tape, w, dw)
        tape._record(out, bwd)
    return out


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var,
                train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with biased batch statistics and updates the
    running arrays in place (running = (1-momentum)*running + momentum*batch).
    Eval mode uses the running statistics.
    """
    if x.data.ndim != 4 or gamma.data.shape != (x.data.shape[1],):
        raise ShapeMismatchError(f"batchnorm2d: x {x.data.shape}, gamma {gamma.data.shape}")
    n_, c, h_, w_ = x.data.shape
    m = n_ * h_ * w_
    if train:
        # single-pass channel reductions; biased variance throughout
        mean = np.einsum("nchw->c", x.data, dtype=np.float64) / m
        sq = np.einsum("nchw,nchw->c", x.data, x.data, dtype=np.float64) / m
        var = np.maximum(sq - mean * mean, 0.0)
        with np.errstate(over="ignore"):
            mean = mean.astype(x.data.dtype)
            var = var.astype(x.data.dtype)
        if not (np.isfinite(mean).all() and np.isfinite(var).all()):
            raise NonFiniteValueError("batch statistics overflow in batchnorm2d")
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = np.asarray(running_mean, dtype=x.data.dtype)
        var = np.asarray(running_var, dtype=x.data.dtype)
    ivar = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    scale = gamma.data * ivar
    shift = beta.data - mean * scale
    y = x.data * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)
    out, tape = _make_out(y, "batchnorm2d", (x, gamma, beta))
    if tape:
        def bwd(dy):
            xhat = (x.data - mean.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
            _accum(tape, gamma, np.einsum("nchw,nchw->c", dy, xhat))
            _accum(tape, beta, np.einsum("nchw->c", dy))
            if x.requires_grad:
                dxhat = dy * gamma.data.reshape(1, c, 1, 1)
                if train:
                    s1 = np.einsum("nchw->c", dxhat).reshape(1, c, 1, 1)
                    s2 = np.einsum("nchw,nchw->c", dxhat, xhat).reshape(1, c, 1, 1)
                    dx = (ivar.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
                else:
                    dx = dxhat * ivar.reshape(1, c, 1, 1)
                _accum(tape, x, dx.astype(x.data.dtype))
        tape._record(out, bwd)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"global_avg_pool expects NCHW, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out, tape = _make_out(x.data.mean(axis=(2, 3)), "global_avg_pool", (x,))
    if tape:
        def bwd(dy):
            dx = np.broadcast_to(dy[:, :, None, None] / (h * w), x.data.shape)
            _accum(tape, x, dx.astype(x.data.dtype))
        tape._record(out, bwd)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w.T + b with w of shape (out, in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1] \
            or b.data.shape != (w.data.shape[0],):
        raise ShapeMismatchError(
            f"linear: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}"
        )
    out, tape = _make_out(x.data @ w.data.T + b.data, "linear", (x, w, b))
    if tape:
        def bwd(dy):
            _accum(tape, x, dy @ w.data)
            _accum(tape, w, dy.T @ x.data)
            _accum(tape, b, dy.sum(axis=0))
        tape._record(out, bwd)
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out, tape = _make_out(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors)
    if tape:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def bwd(dy):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * dy.ndim
                idx[axis] = slice(lo, hi)
                _accum(tape, t, dy[tuple(idx)])
        tape._record(out, bwd)
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Stabilized with max subtraction; the mean is accumulated in float64.
    """
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeMismatchError(f"cross_entropy: logits {logits.data.shape}, labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.data.shape[1]:
        raise ShapeMismatchError("labels outside logit class range")
    n = logits.data.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(z)
    sumexp = expz.sum(axis=1, keepdims=True)
    logp = z - np.log(sumexp)
    loss = -logp[np.arange(n), labels].mean(dtype=np.float64)
    out, tape = _make_out(np.asarray(loss, dtype=logits.data.dtype), "softmax_cross_entropy", (logits,))
    if tape:
        softmax = expz / sumexp
        def bwd(dy):
            d = softmax.copy()
            d[np.arange(n), labels] -= 1.0
            _accum(tape, logits, (float(dy) / n) * d)
        tape._record(out, bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Scalar sum of all elements."""
    out, tape = _make_out(np.asarray(x.data.sum(), dtype=x.data.dtype), "sum_all", (x,))
    if tape:
        def bwd(dy):
            _accum(tape, x, np.full_like(x.data, float(dy)))
        tape._record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             velocities=None):
    """One SGD update per parameter, consuming .grad:

        v <- momentum*v + grad + weight_decay*param
        param <- param - lr*v

    velocities maps parameter position to its velocity buffer; pass the
    returned dict back in on the next step.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if velocities is None:
        velocities = {}
    for i, p in enumerate(params):
        if p.grad is None or p.grad.shape != p.data.shape:
            raise ShapeMismatchError(f"param {i}: grad missing or shape mismatch")
        v = velocities.get(i)
        if v is None:
            v = np.zeros_like(p.data)
            velocities[i] = v
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v
    return velocities


def zero_grads(params):
    for p in params:
        p.grad = None
