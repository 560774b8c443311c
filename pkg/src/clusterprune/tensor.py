"""Dense array primitives with hand-written gradients.

Activations are laid out ``(H, W, M)`` per sample, optionally with a leading
batch axis, and conv filter banks are ``(d, d, M, N)``. Dense weights are
``(D, N)``. Everything is plain numpy, float64 unless the caller passes
float32 arrays.

The fast convolution gathers windows into a column matrix and does a single
matmul. :func:`conv2d_oracle` computes the same thing with explicit loops and
exists only to check the fast path.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("input contains NaN or Inf")


def resolve_padding(padding, d: int) -> int:
    if padding == "valid":
        return 0
    if padding == "same":
        if d % 2 == 0:
            raise ShapeError(f"'same' padding needs an odd kernel, got d={d}")
        return (d - 1) // 2
    p = int(padding)
    if p < 0:
        raise ShapeError(f"padding must be >= 0, got {p}")
    return p


def conv_output_size(size: int, d: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - d
    if span < 0:
        raise ShapeError(f"kernel {d} larger than padded extent {size + 2 * pad}")
    return span // stride + 1


def _batched(x, name="input"):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name} must be (H, W, M) or (B, H, W, M), got shape {x.shape}")


def _conv_checks(x, filters, bias, stride):
    if filters.ndim != 4 or filters.shape[0] != filters.shape[1]:
        raise ShapeError(f"filters must be (d, d, M, N), got {filters.shape}")
    if x.shape[-1] != filters.shape[2]:
        raise ShapeError(
            f"input has {x.shape[-1]} channels but filters expect {filters.shape[2]}"
        )
    if bias is not None and bias.shape != (filters.shape[3],):
        raise ShapeError(f"bias must be ({filters.shape[3]},), got {bias.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")


def im2col(x, d: int, stride: int, pad: int) -> np.ndarray:
    """Windows of a batched input as rows ``(B, H', W', d*d*M)``.

    Row layout matches ``filters.reshape(d*d*M, N)``.
    """
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (d, d), axis=(1, 2))[:, ::stride, ::stride]
    # win is (B, H', W', M, d, d)
    b, ho, wo, m = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b, ho, wo, d * d * m)


def col2im(cols, x_shape, d: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`; overlapping windows accumulate in a fixed order."""
    b, h, w, m = x_shape
    ho, wo = cols.shape[1], cols.shape[2]
    cols = cols.reshape(b, ho, wo, d, d, m)
    out = np.zeros((b, h + 2 * pad, w + 2 * pad, m), dtype=cols.dtype)
    for i in range(d):
        for j in range(d):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    if pad:
        out = out[:, pad:-pad, pad:-pad, :]
    return out


def conv2d_forward(x, filters, bias=None, stride=1, padding=0):
    """2-D cross-correlation summed over input channels, plus bias.

    ``x`` is ``(H, W, M)`` or ``(B, H, W, M)``; the output keeps the same
    batching. No nonlinearity is applied here.
    """
    _conv_checks(x, filters, bias, stride)
    _check_finite(x, filters, *(() if bias is None else (bias,)))
    out, _ = conv2d_forward_cols(x, filters, bias, stride, padding)
    return out


def conv2d_forward_cols(x, filters, bias, stride, padding):
    """Forward pass that also returns the column matrix for reuse in backward."""
    xb, single = _batched(x)
    d, _, m, n = filters.shape
    pad = resolve_padding(padding, d)
    conv_output_size(xb.shape[1], d, stride, pad)
    conv_output_size(xb.shape[2], d, stride, pad)
    cols = im2col(xb, d, stride, pad)
    out = cols @ filters.reshape(d * d * m, n)
    if bias is not None:
        out += bias
    return (out[0] if single else out), cols


def conv2d_backward(x, filters, grad_output, stride=1, padding=0):
    """Gradients of a conv layer: ``(grad_input, grad_filters, grad_bias)``."""
    _conv_checks(x, filters, None, stride)
    xb, single = _batched(x)
    d = filters.shape[0]
    pad = resolve_padding(padding, d)
    cols = im2col(xb, d, stride, pad)
    gi, gf, gb = conv2d_backward_cols(cols, xb.shape, filters, grad_output, stride, pad)
    return (gi[0] if single else gi), gf, gb


def conv2d_backward_cols(cols, x_shape, filters, grad_output, stride, pad):
    d, _, m, n = filters.shape
    go, _ = _batched(grad_output, "grad_output")
    if go.shape[:3] != cols.shape[:3] or go.shape[3] != n:
        raise ShapeError(
            f"grad_output shape {go.shape} does not match forward output "
            f"{cols.shape[:3] + (n,)}"
        )
    go2 = go.reshape(-1, n)
    cols2 = cols.reshape(-1, d * d * m)
    grad_filters = (cols2.T @ go2).reshape(d, d, m, n)
    grad_bias = go2.sum(axis=0)
    gcols = (go2 @ filters.reshape(d * d * m, n).T).reshape(cols.shape)
    grad_input = col2im(gcols, x_shape, d, stride, pad)
    return grad_input, grad_filters, grad_bias


def conv2d_oracle(x, filters, bias=None, stride=1, padding=0):
    """Reference convolution by explicit loops over every index.

    Slow on purpose; used only to validate :func:`conv2d_forward`.
    """
    _conv_checks(x, filters, bias, stride)
    _check_finite(x, filters, *(() if bias is None else (bias,)))
    xb, single = _batched(x)
    d, _, m, n = filters.shape
    pad = resolve_padding(padding, d)
    bsz, h, w, _ = xb.shape
    ho = conv_output_size(h, d, stride, pad)
    wo = conv_output_size(w, d, stride, pad)
    out = np.zeros((bsz, ho, wo, n), dtype=np.result_type(xb, filters))
    for b in range(bsz):
        for oy in range(ho):
            for ox in range(wo):
                for j in range(n):
                    acc = 0.0 if bias is None else float(bias[j])
                    for ky in range(d):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(d):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= w:
                                continue
                            for c in range(m):
                                acc += float(filters[ky, kx, c, j]) * float(xb[b, iy, ix, c])
                    out[b, oy, ox, j] = acc
    return out[0] if single else out


def dense_forward(x, weights, bias=None):
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense input {x.shape} does not match weights {weights.shape}")
    out = x @ weights
    if bias is not None:
        out = out + bias
    return out


def dense_backward(x, weights, grad_output):
    """``(grad_input, grad_weights, grad_bias)`` for ``x @ W + b``."""
    if grad_output.shape[-1] != weights.shape[1]:
        raise ShapeError(f"grad_output {grad_output.shape} does not match weights {weights.shape}")
    x2 = x.reshape(-1, weights.shape[0])
    g2 = grad_output.reshape(-1, weights.shape[1])
    return grad_output @ weights.T, x2.T @ g2, g2.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_output):
    return grad_output * (x > 0)


def _pool_windows(x, size, stride):
    xb, single = _batched(x)
    conv_output_size(xb.shape[1], size, stride, 0)
    conv_output_size(xb.shape[2], size, stride, 0)
    win = sliding_window_view(xb, (size, size), axis=(1, 2))[:, ::stride, ::stride]
    return win.reshape(win.shape[:4] + (size * size,)), xb.shape, single


def maxpool_forward(x, size=2, stride=None):
    stride = stride or size
    win, _, single = _pool_windows(x, size, stride)
    out = win.max(axis=-1)
    return out[0] if single else out


def maxpool_backward(x, grad_output, size=2, stride=None):
    """Routes each output gradient to the first maximal input of its window."""
    stride = stride or size
    win, shape, single = _pool_windows(x, size, stride)
    arg = win.argmax(axis=-1)
    go, _ = _batched(grad_output, "grad_output")
    ho, wo = go.shape[1], go.shape[2]
    out = np.zeros(shape, dtype=go.dtype)
    for i in range(size):
        for j in range(size):
            hit = arg == i * size + j
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += go * hit
    return out[0] if single else out


def avgpool_forward(x, size=2, stride=None):
    stride = stride or size
    win, _, single = _pool_windows(x, size, stride)
    out = win.mean(axis=-1)
    return out[0] if single else out


def avgpool_backward(x, grad_output, size=2, stride=None):
    stride = stride or size
    xb, single = _batched(x)
    go, _ = _batched(grad_output, "grad_output")
    ho, wo = go.shape[1], go.shape[2]
    share = go / (size * size)
    out = np.zeros(xb.shape, dtype=go.dtype)
    for i in range(size):
        for j in range(size):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += share
    return out[0] if single else out


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``.

    ``logits`` is ``(C,)`` with an int label, or ``(B, C)`` with ``(B,)`` labels.
    """
    single = logits.ndim == 1
    z = logits[None] if single else logits
    y = np.atleast_1d(np.asarray(labels))
    if y.shape[0] != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} logit rows but {y.shape[0]} labels")
    c = z.shape[1]
    if np.any(y < 0) or np.any(y >= c):
        raise ValueError(f"label out of range [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(logsum - shifted[rows, y]))
    grad = np.exp(shifted - logsum[:, None])
    grad[rows, y] -= 1.0
    grad /= z.shape[0]
    return loss, (grad[0] if single else grad)


def grad_check(f: Callable, point, step: float = 1e-6) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` maps an array to ``(value, gradient)``; only the value is used at the
    perturbed points.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    point = np.array(point, dtype=np.float64)
    value, analytic = f(point.copy())
    if not np.isfinite(value):
        raise NumericError("f is not finite at the check point")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(point.shape)
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(point.copy())[0]
        flat[i] = orig - step
        lo = f(point.copy())[0]
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"f is not finite near coordinate {i}")
        numeric.reshape(-1)[i] = (hi - lo) / (2 * step)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))
