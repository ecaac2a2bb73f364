"""Differentiable operations on tensors.

Every op computes forward in plain numpy, then records a pullback closure on
the active tape (if any input is tracked). Closures receive the upstream
gradient plus a per-input "needed" mask so gradients for constants are never
computed. All ops return fresh tensors; nothing mutates tracked data.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.linalg import lapack

from ..errors import NumericalError, ShapeError
from .tensor import Tensor, active_tape, debug_enabled


def _result(data: np.ndarray) -> Tensor:
    if debug_enabled() and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite values in op output")
    t = Tensor.__new__(Tensor)
    t.data = data
    t._tape = None
    t._node = None
    return t


def _record(out: Tensor, inputs, fn) -> Tensor:
    tape = active_tape()
    if tape is None:
        return out
    return tape.record(out, inputs, fn)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data + b.data)

    def fn(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _record(out, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data - b.data)

    def fn(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _record(out, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data * b.data)

    def fn(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _record(out, (a, b), fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data / b.data)

    def fn(g, needs):
        return (
            _unbroadcast(g / b.data, a.shape) if needs[0] else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if needs[1] else None,
        )

    return _record(out, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    out = _result(-a.data)
    return _record(out, (a,), lambda g, needs: (-g,))


def exp(a: Tensor) -> Tensor:
    out = _result(np.exp(a.data))
    out_data = out.data
    return _record(out, (a,), lambda g, needs: (g * out_data,))


def log(a: Tensor) -> Tensor:
    out = _result(np.log(a.data))
    return _record(out, (a,), lambda g, needs: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = _result(np.sqrt(a.data))
    out_data = out.data
    return _record(out, (a,), lambda g, needs: (g * (0.5 / out_data),))


def absolute(a: Tensor) -> Tensor:
    """|x| with subgradient sign(x); zero at x == 0."""
    out = _result(np.abs(a.data))
    return _record(out, (a,), lambda g, needs: (g * np.sign(a.data),))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    """max(x, slope*x); gradient 1 for x >= 0 (including 0), slope below."""
    out = _result(np.where(a.data >= 0, a.data, slope * a.data))

    def fn(g, needs):
        return (g * np.where(a.data >= 0, 1.0, slope).astype(g.dtype),)

    return _record(out, (a,), fn)


# ------------------------------------------------------------------- shaping


def reshape(a: Tensor, shape) -> Tensor:
    out = _result(a.data.reshape(shape))
    return _record(out, (a,), lambda g, needs: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    out = _result(a.data.transpose(axes))
    return _record(out, (a,), lambda g, needs: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = _result(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def fn(g, needs):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(p if need else None for p, need in zip(pieces, needs))

    return _record(out, tensors, fn)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(a.data.sum(axis=axis, keepdims=keepdims))
    ax = (axis,) if isinstance(axis, int) else axis
    a_ndim = a.ndim

    def fn(g, needs):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, tuple(x % a_ndim for x in ax))
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(a.data.mean(axis=axis, keepdims=keepdims))
    ax = (axis,) if isinstance(axis, int) else axis
    count = a.size if ax is None else int(np.prod([a.shape[x] for x in ax]))
    a_ndim = a.ndim

    def fn(g, needs):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, tuple(x % a_ndim for x in ax))
        return (np.broadcast_to(g, a.shape) / count,)

    return _record(out, (a,), fn)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a matrix; backward scatter-adds into the source."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows index out of range")
    out = _result(a.data[idx])

    def fn(g, needs):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record(out, (a,), fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = _result(a.data @ b.data)

    def fn(g, needs):
        return (
            g @ b.data.T if needs[0] else None,
            a.data.T @ g if needs[1] else None,
        )

    return _record(out, (a, b), fn)


# --------------------------------------------------------------- convolution


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Cross-correlation with zero padding over NCHW input.

    Output extent per spatial dim: floor((H + 2p - d*(k-1) - 1)/s) + 1.
    """
    if stride < 1 or dilation < 1:
        raise ShapeError(f"stride/dilation must be positive, got {stride}/{dilation}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW kernel")
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"kernel expects {ci} input channels, input has {c}")
    if bias.shape != (co,):
        raise ShapeError(f"bias shape {bias.shape} != ({co},)")
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = xp.strides
    win = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
    )
    out_data = np.tensordot(kernel.data, win, axes=([1, 2, 3], [1, 2, 3]))
    out_data = out_data.transpose(1, 0, 2, 3) + bias.data.reshape(1, co, 1, 1)
    out = _result(np.ascontiguousarray(out_data))

    def fn(g, needs):
        gx = gk = gb = None
        if needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        if needs[1]:
            gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 4, 5]))
        if needs[0]:
            # scatter-add tap contributions back onto the padded canvas
            gkx = np.tensordot(g, kernel.data, axes=([1], [0]))  # (n, ho, wo, ci, kh, kw)
            gxp = np.zeros_like(xp)
            hspan = (ho - 1) * stride + 1
            wspan = (wo - 1) * stride + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        :,
                        :,
                        i * dilation : i * dilation + hspan : stride,
                        j * dilation : j * dilation + wspan : stride,
                    ] += gkx[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gk, gb)

    return _record(out, (x, kernel, bias), fn)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; odd extents padded right/bottom with -inf.

    Gradient routes to the argmax of each window, first index on ties.
    """
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("max_pool2x2 on empty spatial extent")
    ph, pw = h % 2, w % 2
    xd = x.data
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    h2, w2 = (h + ph) // 2, (w + pw) // 2
    win = xd.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = _result(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])

    def fn(g, needs):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)
        return (gx[:, :, :h, :w],)

    return _record(out, (x,), fn)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("global_avg_pool on empty spatial extent")
    out = _result(x.data.mean(axis=(2, 3), keepdims=True))

    def fn(g, needs):
        return (np.broadcast_to(g, x.shape) / (h * w),)

    return _record(out, (x,), fn)


def pool2d(x: Tensor, mode: str) -> Tensor:
    if mode == "max2x2":
        return max_pool2x2(x)
    if mode == "global_avg":
        return global_avg_pool(x)
    raise ShapeError(f"unknown pool mode {mode!r}")


def replicate_upsample(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Tile an N,C,1,1 feature over a target_h x target_w grid."""
    if target_h < 1 or target_w < 1:
        raise ShapeError("replicate_upsample target extents must be positive")
    n, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise ShapeError(f"replicate_upsample expects 1x1 spatial input, got {h}x{w}")
    out = _result(np.broadcast_to(x.data, (n, c, target_h, target_w)).copy())

    def fn(g, needs):
        return (g.sum(axis=(2, 3), keepdims=True),)

    return _record(out, (x,), fn)


@functools.lru_cache(maxsize=64)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic interpolation matrix mapping n_in samples to n_out.

    Sample positions follow the half-pixel convention: src = (dst+0.5)*scale-0.5,
    clamped to the valid range.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of NCHW maps (separable matrix form, exact adjoint)."""
    n, c, h, w = x.shape
    mh = _bilinear_matrix(h, out_h).astype(x.dtype)
    mw = _bilinear_matrix(w, out_w).astype(x.dtype)
    tmp = np.tensordot(x.data, mh, axes=([2], [1]))  # (n, c, w, out_h)
    out_data = np.tensordot(tmp, mw, axes=([2], [1]))  # (n, c, out_h, out_w)
    out = _result(np.ascontiguousarray(out_data))

    def fn(g, needs):
        t = np.tensordot(g, mh, axes=([2], [0]))  # (n, c, out_w, h)
        gx = np.tensordot(t, mw, axes=([2], [0]))  # (n, c, h, w)
        return (np.ascontiguousarray(gx),)

    return _record(out, (x,), fn)


# ------------------------------------------------------------- normalization


@dataclass
class BatchNormState:
    """Per-channel running statistics plus the normalization constants."""

    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Channelwise batch normalization over (N, H, W).

    Train mode normalizes with the batch's biased variance and updates the
    running stats (unbiased variance, momentum blend); eval mode normalizes
    with the stored running stats.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    if state.mean.shape != (c,):
        raise ShapeError(f"running stats cover {state.mean.shape[0]} channels, input has {c}")
    eps = state.eps
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ShapeError("train-mode batchnorm needs >1 element per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        mom = state.momentum
        state.mean = ((1 - mom) * state.mean + mom * mu).astype(state.mean.dtype)
        state.var = ((1 - mom) * state.var + mom * var * (m / (m - 1))).astype(state.var.dtype)
    elif mode == "eval":
        inv = 1.0 / np.sqrt(state.var.astype(x.dtype) + eps)
        xhat = (x.data - state.mean.astype(x.dtype).reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        m = None
    else:
        raise ShapeError(f"unknown batchnorm mode {mode!r}")
    out = _result(gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1))

    def fn(g, needs):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if needs[0]:
            gi = gamma.data.reshape(1, c, 1, 1) * inv.reshape(1, c, 1, 1)
            if mode == "train":
                gx = gi * (g - gb.reshape(1, c, 1, 1) / m - xhat * gg.reshape(1, c, 1, 1) / m)
            else:
                gx = gi * g
        return (gx, gg if needs[1] else None, gb if needs[2] else None)

    return _record(out, (x, gamma, beta), fn)


def l2_normalize_channels(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each (n, c) channel map to unit L2 norm over its pixels."""
    norms = np.sqrt((x.data * x.data).sum(axis=(2, 3), keepdims=True) + eps)
    out = _result(x.data / norms)

    def fn(g, needs):
        dot = (g * x.data).sum(axis=(2, 3), keepdims=True)
        return (g / norms - x.data * (dot / norms**3),)

    return _record(out, (x,), fn)


# ------------------------------------------------------------ linear algebra


def _potrf(a: np.ndarray):
    f = lapack.dpotrf if a.dtype == np.float64 else lapack.spotrf
    c, info = f(a, lower=1, clean=1, overwrite_a=0)
    return c, info


def _potrs(c: np.ndarray, b: np.ndarray) -> np.ndarray:
    f = lapack.dpotrs if c.dtype == np.float64 else lapack.spotrs
    x, info = f(c, np.ascontiguousarray(b), lower=1)
    if info != 0:
        raise NumericalError(f"triangular solve failed (info={info})")
    return x


def spd_solve(a: Tensor, b: Tensor) -> Tensor:
    """Solve A X = B for symmetric positive definite A via Cholesky.

    A is symmetrized before factorization, which makes the reverse rule
    grad_A = -sym(grad_B X^T), grad_B = A^-1 G exact for elementwise
    perturbations of A.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"spd_solve expects square A, got {a.shape}")
    if b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ShapeError(f"B rows must match A, got A {a.shape}, B {b.shape}")
    a_sym = 0.5 * (a.data + a.data.T)
    chol, info = _potrf(a_sym)
    if info > 0:
        raise NumericalError(
            f"Cholesky factorization failed: leading minor of order {info} is not positive definite"
        )
    if info < 0:
        raise NumericalError(f"Cholesky factorization: invalid argument {-info}")
    x = _potrs(chol, b.data)
    out = _result(x)

    def fn(g, needs):
        gb = _potrs(chol, g)
        ga = None
        if needs[0]:
            m = gb @ x.T
            ga = -0.5 * (m + m.T)
        return (ga, gb if needs[1] else None)

    return _record(out, (a, b), fn)


# ----------------------------------------------------------------- objective


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over rows of -log softmax(logits)[label], max-stabilized."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be P x C, got {logits.shape}")
    p, c = logits.shape
    if p < 1:
        raise ShapeError("softmax_cross_entropy needs at least one row")
    if labels.shape != (p,):
        raise ShapeError(f"labels shape {labels.shape} != ({p},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    softmax = ez / denom
    rows = np.arange(p)
    nll = np.log(denom[:, 0]) - z[rows, labels]
    out = _result(np.asarray(nll.mean(), dtype=logits.dtype))

    def fn(g, needs):
        gl = softmax.copy()
        gl[rows, labels] -= 1.0
        gl *= g / p
        return (gl,)

    return _record(out, (logits,), fn)


def softmax_probs(logits: Tensor) -> np.ndarray:
    """Row-stochastic softmax of a logit matrix (numpy, no tape)."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)
