"""Forward/backward kernels for the CNN, NHWC layout.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes the
upstream gradient and that cache. Kernels keep the dtype of their inputs, so the
same code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import DegenerateBatch, LabelOutOfRange, NonFiniteError, ShapeMismatch

ACTIVATIONS = ("relu", "elu", "gelu")


def check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{name}: non-finite values")


# -- convolution -------------------------------------------------------------

def _im2col(xp, k):
    # (B, H, W, Cin, k, k) -> (B*H*W, k*k*Cin) ordered (kh, kw, cin) like HWIO kernels
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    b, h, w, c = win.shape[:4]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, k * k * c)


def conv2d_forward(x, w, b):
    """Stride-1 'same' cross-correlation. ``w`` is (k, k, Cin, Cout), k odd."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ShapeMismatch(f"conv2d: bad shapes x={x.shape} w={w.shape}")
    if x.shape[3] != w.shape[2] or b.shape != (w.shape[3],):
        raise ShapeMismatch(f"conv2d: x={x.shape} w={w.shape} b={b.shape}")
    k = w.shape[0]
    pad = k // 2
    B, H, W, _ = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = _im2col(xp, k)
    out = (cols @ w.reshape(-1, w.shape[3]) + b).reshape(B, H, W, w.shape[3])
    return out, (x.shape, cols, w)


def conv2d_backward(dout, cache):
    xshape, cols, w = cache
    B, H, W, cin = xshape
    k = w.shape[0]
    pad = k // 2
    d2 = dout.reshape(-1, w.shape[3])
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(-1, w.shape[3]).T).reshape(B, H, W, k, k, cin)
    dxp = np.zeros((B, H + 2 * pad, W + 2 * pad, cin), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + H, j:j + W, :] += dcols[:, :, :, i, j, :]
    return dxp[:, pad:pad + H, pad:pad + W, :], dw, db


# -- batch normalisation -----------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var, train=True,
                      momentum=0.99, eps=1e-3):
    """Per-channel (last axis) normalisation.

    In train mode returns ``(out, cache, new_mean, new_var)`` with the running
    statistics blended as ``momentum * old + (1 - momentum) * batch``; the inputs
    are not modified. In inference mode the cache is ``None`` and the running
    statistics are returned unchanged.
    """
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeMismatch(f"batchnorm: {x.shape[-1]} channels vs gamma {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    if not train:
        inv = 1.0 / np.sqrt(running_var + eps)
        return (x - running_mean) * (inv * gamma) + beta, None, running_mean, running_var
    count = x.size // x.shape[-1]
    if count < 2:
        raise DegenerateBatch("batchnorm needs at least two values per channel in train mode")
    mean = x.mean(axis=axes)
    xc = x - mean
    var = (xc * xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma + beta
    new_mean = momentum * running_mean + (1 - momentum) * mean
    new_var = momentum * running_var + (1 - momentum) * var
    return out, (xhat, inv, gamma), new_mean.astype(running_mean.dtype), new_var.astype(running_var.dtype)


def batchnorm_backward(dout, cache):
    """Exact gradient through the batch statistics."""
    xhat, inv, gamma = cache
    axes = tuple(range(dout.ndim - 1))
    n = dout.size // dout.shape[-1]
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    dx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


# -- pooling -----------------------------------------------------------------

def maxpool2_forward(x):
    """2x2 max pool, stride 2, trailing odd row/column dropped.

    Ties go to the first position in row-major window order.
    """
    if x.ndim != 4 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeMismatch(f"maxpool2: bad input shape {x.shape}")
    B, H, W, C = x.shape
    ho, wo = H // 2, W // 2
    win = x[:, :2 * ho, :2 * wo, :].reshape(B, ho, 2, wo, 2, C)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(B, ho, wo, C, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    shape, idx = cache
    B, H, W, C = shape
    ho, wo = H // 2, W // 2
    win = np.zeros((B, ho, wo, C, 4), dtype=dout.dtype)
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    win = win.reshape(B, ho, wo, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * ho, 2 * wo, C)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :2 * ho, :2 * wo, :] = win
    return dx


# -- dense -------------------------------------------------------------------

def dense_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense: x={x.shape} w={w.shape} b={b.shape}")
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


# -- activations -------------------------------------------------------------

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def activation_forward(x, kind):
    """ReLU, ELU (alpha = 1) or exact erf-based GELU."""
    if kind == "relu":
        out = np.maximum(x, 0)
    elif kind == "elu":
        out = np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
    elif kind == "gelu":
        out = x * (0.5 * (1.0 + erf(x * _SQRT_HALF)))
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return out.astype(x.dtype, copy=False), (x, kind)


def activation_backward(dout, cache):
    x, kind = cache
    if kind == "relu":
        d = (x > 0).astype(x.dtype)
    elif kind == "elu":
        d = np.where(x > 0, 1.0, np.exp(np.minimum(x, 0)))
    else:
        cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
        d = cdf + x * (_INV_SQRT_2PI * np.exp(-0.5 * x * x))
    return (dout * d).astype(dout.dtype, copy=False)


# -- loss --------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy of softmax(logits); returns ``(loss, dlogits, probs)``."""
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeMismatch(f"labels shape {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise LabelOutOfRange(f"labels must be in 0..{K - 1}")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(logsum - z[rows, labels]))
    probs = np.exp(z - logsum[:, None])
    d = probs.copy()
    d[rows, labels] -= 1
    return loss, d / B, probs
