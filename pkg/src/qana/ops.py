"""Core tensor operations with analytic gradients.

Conventions (fixed across the package):
  * activations are NHWC [batch, height, width, channels], row-major numpy arrays
  * conv kernels are [kh, kw, in_channels, out_channels]; depthwise kernels
    [kh, kw, channels, 1]; dense weights [out, in]
  * 'same' padding follows the asymmetric convention: when the total padding is
    odd, the extra row/column goes on the bottom/right
  * every forward returns (output, cache); the matching *_backward consumes the
    upstream gradient plus that cache
  * ops run in the dtype of their input, so the same code path serves float32
    training and float64 gradient checking
  * clamp-style activations (relu6, bounded_unit) use subgradient 0 exactly at
    their boundary points

Convolutions are computed as strided-window contractions (BLAS underneath);
the test suite checks them against independent nested-loop oracles.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


def _pair(v):
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def _same_pad(in_size, k, stride):
    out = -(-in_size // stride)
    total = max((out - 1) * stride + k - in_size, 0)
    before = total // 2
    return before, total - before


def _pad_nhwc(x, kh, kw, sh, sw, padding):
    _, h, w, _ = x.shape
    if padding == "same":
        pt, pb = _same_pad(h, kh, sh)
        pl, pr = _same_pad(w, kw, sw)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ShapeError(
                f"valid padding needs input >= kernel, got spatial ({h},{w}) vs ({kh},{kw})"
            )
        pt = pb = pl = pr = 0
    else:
        raise ShapeError(f"unknown padding mode {padding!r}")
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    return x, (pt, pl)


def _windows(xp, kh, kw, sh, sw):
    # [N, Ho, Wo, C, kh, kw] view into the padded input, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::sh, ::sw]


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite values")


def _require_nhwc(name, x):
    if x.ndim != 4:
        raise ShapeError(f"{name} expects a 4-d NHWC array, got rank {x.ndim}")
    if x.shape[0] == 0:
        raise ShapeError(f"{name} got an empty batch (N=0)")


# ====== convolutions ======

def conv2d(x, kernel, bias=None, stride=1, padding="same"):
    """2D convolution (cross-correlation). Returns (y, cache)."""
    _require_nhwc("conv2d", x)
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [kh,kw,in,out], got rank {kernel.ndim}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[3]}, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must be [{cout}], got {bias.shape}")
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got ({sh},{sw})")

    if kh == 1 and kw == 1 and sh == 1 and sw == 1:
        y = x @ kernel[0, 0]
    else:
        xp, _ = _pad_nhwc(x, kh, kw, sh, sw, padding)
        win = _windows(xp, kh, kw, sh, sw)  # [N,Ho,Wo,C,kh,kw]
        y = np.einsum("nhwcij,ijco->nhwo", win, kernel, optimize=True)
    if bias is not None:
        y = y + bias
    cache = (x.shape, x, kernel, sh, sw, padding, bias is not None)
    return y, cache


def conv2d_backward(dy, cache):
    """Gradients of conv2d. Returns (dx, dkernel, dbias_or_None)."""
    x_shape, x, kernel, sh, sw, padding, has_bias = cache
    kh, kw, cin, cout = kernel.shape
    db = dy.sum(axis=(0, 1, 2)) if has_bias else None

    if kh == 1 and kw == 1 and sh == 1 and sw == 1:
        dk = np.einsum("nhwc,nhwo->co", x, dy, optimize=True)[None, None]
        dx = dy @ kernel[0, 0].T
        return dx, dk, db

    xp, (pt, pl) = _pad_nhwc(x, kh, kw, sh, sw, padding)
    win = _windows(xp, kh, kw, sh, sw)
    dk = np.einsum("nhwcij,nhwo->ijco", win, dy, optimize=True)

    n, hp, wp, _ = xp.shape
    ho, wo = dy.shape[1], dy.shape[2]
    dxp = np.zeros((n, hp, wp, cin), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            # each tap scatters dy @ k[i,j]^T onto its strided footprint
            dxp[:, i : i + sh * ho : sh, j : j + sw * wo : sw, :] += dy @ kernel[i, j].T
    h, w = x_shape[1], x_shape[2]
    dx = dxp[:, pt : pt + h, pl : pl + w, :]
    return dx, dk, db


def depthwise_conv2d(x, kernel, bias=None, stride=1, padding="same"):
    """Depthwise 2D convolution, channel multiplier 1. kernel: [kh,kw,C,1]."""
    _require_nhwc("depthwise_conv2d", x)
    if kernel.ndim != 4 or kernel.shape[3] != 1:
        raise ShapeError(
            f"depthwise kernel must be [kh,kw,C,1], got {getattr(kernel, 'shape', None)}"
        )
    kh, kw, kc, _ = kernel.shape
    if x.shape[3] != kc:
        raise ShapeError(f"depthwise channel mismatch: input has {x.shape[3]}, kernel {kc}")
    if bias is not None and bias.shape != (kc,):
        raise ShapeError(f"depthwise bias must be [{kc}], got {bias.shape}")
    sh, sw = _pair(stride)
    xp, _ = _pad_nhwc(x, kh, kw, sh, sw, padding)
    win = _windows(xp, kh, kw, sh, sw)  # [N,Ho,Wo,C,kh,kw]
    y = np.einsum("nhwcij,ijc->nhwc", win, kernel[..., 0], optimize=True)
    if bias is not None:
        y = y + bias
    cache = (x.shape, x, kernel, sh, sw, padding, bias is not None)
    return y, cache


def depthwise_conv2d_backward(dy, cache):
    x_shape, x, kernel, sh, sw, padding, has_bias = cache
    kh, kw, kc, _ = kernel.shape
    db = dy.sum(axis=(0, 1, 2)) if has_bias else None
    xp, (pt, pl) = _pad_nhwc(x, kh, kw, sh, sw, padding)
    win = _windows(xp, kh, kw, sh, sw)
    dk = np.einsum("nhwcij,nhwc->ijc", win, dy, optimize=True)[..., None]
    n, hp, wp, _ = xp.shape
    ho, wo = dy.shape[1], dy.shape[2]
    dxp = np.zeros((n, hp, wp, kc), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + sh * ho : sh, j : j + sw * wo : sw, :] += dy * kernel[i, j, :, 0]
    h, w = x_shape[1], x_shape[2]
    dx = dxp[:, pt : pt + h, pl : pl + w, :]
    return dx, dk, db


def separable_conv2d(x, dw_kernel, pw_kernel, bias=None, stride=1, padding="same"):
    """Depthwise 3x3 (or kxk) followed by a pointwise 1x1 with optional bias."""
    mid, dw_cache = depthwise_conv2d(x, dw_kernel, None, stride, padding)
    y, pw_cache = conv2d(mid, pw_kernel, bias, 1, "valid")
    return y, (dw_cache, pw_cache)


def separable_conv2d_backward(dy, cache):
    dw_cache, pw_cache = cache
    dmid, dpw, db = conv2d_backward(dy, pw_cache)
    dx, ddw, _ = depthwise_conv2d_backward(dmid, dw_cache)
    return dx, ddw, dpw, db


# ====== normalization ======

def batch_norm(x, gamma, beta, running_mean, running_var, mode, momentum=0.9, eps=1e-5):
    """Per-channel batch normalization over (N, H, W).

    Running stats follow running = momentum*running + (1-momentum)*batch with
    biased batch variance. Returns (y, (new_mean, new_var), cache).
    """
    _require_nhwc("batch_norm", x)
    c = x.shape[3]
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batch_norm {name} must be [{c}], got {arr.shape}")
    if mode == "train":
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        new_mean = momentum * running_mean + (1.0 - momentum) * mean
        new_var = momentum * running_var + (1.0 - momentum) * var
    elif mode == "infer":
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    else:
        raise ShapeError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * ivar
    y = gamma * xhat + beta
    cache = (xhat, ivar, gamma, mode)
    return y, (new_mean, new_var), cache


def batch_norm_backward(dy, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, ivar, gamma, mode = cache
    axes = (0, 1, 2)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    if mode == "infer":
        dx = dy * gamma * ivar
        return dx, dgamma, dbeta
    m = dy.shape[0] * dy.shape[1] * dy.shape[2]
    dxhat = dy * gamma
    dx = ivar * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes) / m)
    return dx, dgamma, dbeta


# ====== activations ======

def relu6(x):
    y = np.minimum(np.maximum(x, 0.0), 6.0)
    mask = ((x > 0.0) & (x < 6.0)).astype(x.dtype)
    return y, mask


def relu6_backward(dy, mask):
    return dy * mask


def bounded_unit(x):
    """Clamp to [0, 1]."""
    y = np.minimum(np.maximum(x, 0.0), 1.0)
    mask = ((x > 0.0) & (x < 1.0)).astype(x.dtype)
    return y, mask


def bounded_unit_backward(dy, mask):
    return dy * mask


def relu(x):
    y = np.maximum(x, 0.0)
    mask = (x > 0.0).astype(x.dtype)
    return y, mask


def relu_backward(dy, mask):
    return dy * mask


def sigmoid(x):
    # split by sign so neither branch exponentiates a large positive value
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, y


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


# ====== pooling and reshaping ======

def maxpool2d(x, window=2, stride=2):
    """2x2 stride-2 max pooling. Ties route gradient to the first window index
    in row-major window order (top-left first)."""
    _require_nhwc("maxpool2d", x)
    if window != 2 or stride != 2:
        raise ShapeError(f"maxpool2d supports window=2 stride=2 only, got {window},{stride}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got ({h},{w})")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    win = win.reshape(n, h // 2, w // 2, 4, c)
    idx = win.argmax(axis=3)
    y = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    cache = (x.shape, idx)
    return y, cache


def maxpool2d_backward(dy, cache):
    x_shape, idx = cache
    n, h, w, c = x_shape
    dwin = np.zeros((n, h // 2, w // 2, 4, c), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
    dx = dwin.reshape(n, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c)
    return dx


def spatial_mean(x):
    """Mean over H and W: [N,H,W,C] -> [N,C]."""
    _require_nhwc("spatial_mean", x)
    y = x.mean(axis=(1, 2))
    return y, x.shape


def spatial_mean_backward(dy, x_shape):
    n, h, w, c = x_shape
    return np.broadcast_to(dy[:, None, None, :] / (h * w), x_shape).astype(dy.dtype)


def flatten(x):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(dy, x_shape):
    return dy.reshape(x_shape)


# ====== dense and dropout ======

def dense(x, w, b=None):
    """y = x @ w.T + b with w stored [out, in]."""
    if x.ndim != 2:
        raise ShapeError(f"dense expects [N,D] input, got rank {x.ndim}")
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"dense weight must be [out,{x.shape[1]}], got {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense bias must be [{w.shape[0]}], got {b.shape}")
    y = x @ w.T
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def dense_backward(dy, cache):
    x, w, has_bias = cache
    dx = dy @ w
    dw = dy.T @ x
    db = dy.sum(axis=0) if has_bias else None
    return dx, dw, db


def dropout(x, rate, mode, rng=None):
    """Inverted dropout. rate must lie in [0, 1). Identity in infer mode."""
    if not (0.0 <= rate < 1.0):
        raise ShapeError(f"dropout rate must be in [0,1), got {rate}")
    if mode not in ("train", "infer"):
        raise ShapeError(f"dropout mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x, (np.ones_like(x), 1.0)
    if rng is None:
        raise ShapeError("dropout in train mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate).astype(x.dtype)
    return x * mask / keep, (mask, keep)


def dropout_backward(dy, cache):
    mask, keep = cache
    return dy * mask / keep
