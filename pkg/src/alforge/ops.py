"""Dense float64 array kernel: the few deterministic ops the network needs.

Arrays are plain C-contiguous float64 numpy arrays. Every public op
validates shapes, and any NaN/Inf in a result raises instead of
propagating silently. Convolution is implemented via 3x3 patch stacking
and einsum so the summation order is fixed and runs are bit-reproducible.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NumericError(ValueError):
    """Non-finite values encountered where finiteness is required."""


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def conv2d_valid(x, kernels, bias) -> np.ndarray:
    """Valid 3x3 cross-correlation, stride 1, plus per-channel bias.

    `x` is (C_in, H, W) or batched (n, C_in, H, W); kernels are
    (C_out, C_in, 3, 3).
    """
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    bias = as_tensor(bias)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise DimensionError(f"bad conv shapes: input {x.shape}, kernels {kernels.shape}")
    n, c_in, h, w = x.shape
    c_out = kernels.shape[0]
    if kernels.shape[1] != c_in:
        raise DimensionError(f"kernel C_in {kernels.shape[1]} != input C_in {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} != ({c_out},)")
    if h < 3 or w < 3:
        raise DimensionError(f"input {h}x{w} smaller than 3x3 kernel")
    cols = _patches3x3(x)
    out = np.einsum("ncijhw,ocij->nohw", cols, kernels, optimize=False)
    out += bias[None, :, None, None]
    check_finite(out, "conv2d result")
    return out[0] if squeeze else out


def _patches3x3(x: np.ndarray) -> np.ndarray:
    """(n, C, H, W) -> (n, C, 3, 3, H-2, W-2) view-stack of shifted windows."""
    n, c, h, w = x.shape
    ho, wo = h - 2, w - 2
    cols = np.empty((n, c, 3, 3, ho, wo), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = x[:, :, i : i + ho, j : j + wo]
    return cols


def conv2d_backward(x, kernels, dout):
    """Gradients of conv2d_valid w.r.t. kernels, bias and input."""
    x = as_tensor(x)
    dout = as_tensor(dout)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
        dout = dout[None]
    cols = _patches3x3(x)
    dk = np.einsum("nohw,ncijhw->ocij", dout, cols, optimize=False)
    db = dout.sum(axis=(0, 2, 3))
    dcols = np.einsum("nohw,ocij->ncijhw", dout, kernels, optimize=False)
    dx = np.zeros_like(x)
    ho, wo = dout.shape[2], dout.shape[3]
    for i in range(3):
        for j in range(3):
            dx[:, :, i : i + ho, j : j + wo] += dcols[:, :, i, j]
    if squeeze:
        dx = dx[0]
    return dk, db, dx


def maxpool2d(x, window: int = 2):
    """2x2 max pooling, stride 2; odd trailing row/column dropped.

    Returns (pooled, argmax) where argmax holds the flat within-window
    index (0..3, first occurrence on ties) needed by the backward pass.
    """
    if window != 2:
        raise DimensionError("only window=2 pooling is supported")
    x = as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects (C,H,W) or (n,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise DimensionError(f"input {h}x{w} too small for 2x2 pooling")
    h2, w2 = h // 2, w // 2
    win = (
        x[:, :, : h2 * 2, : w2 * 2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    check_finite(out, "maxpool result")
    if squeeze:
        return out[0], idx[0]
    return out, idx


def maxpool2d_backward(x_shape, idx, dout) -> np.ndarray:
    """Scatter pooled gradients back to the argmax positions."""
    squeeze = len(x_shape) == 3
    if squeeze:
        x_shape = (1,) + tuple(x_shape)
        idx = idx[None]
        dout = dout[None]
    n, c, h, w = x_shape
    h2, w2 = idx.shape[2], idx.shape[3]
    dwin = np.zeros((n, c, h2, w2, 4), dtype=np.float64)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=np.float64)
    dx[:, :, : h2 * 2, : w2 * 2] = (
        dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)
    )
    return dx[0] if squeeze else dx


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    z = as_tensor(logits)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None]
    if z.ndim != 2:
        raise DimensionError(f"softmax expects 1-D or 2-D logits, got {z.shape}")
    if not np.isfinite(z).all():
        raise NumericError("non-finite logits")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if squeeze else p


def sigmoid(x) -> np.ndarray:
    x = as_tensor(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)
