"""Dense NCHW layers with hand-written backward passes.

Every forward returns ``(out, cache)``; the matching ``*_backward`` takes the
upstream gradient and that cache. Arrays are plain numpy arrays laid out as
(batch, channels, rows, cols).
"""
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_switch_log = None


class ShapeError(ValueError):
    """Raised when an operand's dimension does not match what a layer expects."""


def _require(cond, msg):
    if not cond:
        raise ShapeError(msg)


def _check4(x, name="input"):
    _require(x.ndim == 4, f"{name}: expected rank 4 (n, c, h, w), got rank {x.ndim}")


# ---------------------------------------------------------------- conv


def conv2d(x, w, b=None, stride=1, padding=0):
    """2D cross-correlation.

    x: (n, c_in, h, w); w: (c_out, c_in, k, k); b: (c_out,) or None.
    Output is (n, c_out, (h + 2p - k)//s + 1, (w + 2p - k)//s + 1).
    """
    _check4(x)
    _require(w.ndim == 4, f"kernels: expected rank 4 (c_out, c_in, k, k), got rank {w.ndim}")
    n, c, h, wd = x.shape
    c_out, c_in, kh, kw = w.shape
    _require(c == c_in, f"channels: input has {c}, kernels expect {c_in}")
    _require(stride >= 1, f"stride: must be positive, got {stride}")
    _require(padding >= 0, f"padding: must be non-negative, got {padding}")
    _require(kh <= h + 2 * padding, f"height: kernel {kh} exceeds padded input {h + 2 * padding}")
    _require(kw <= wd + 2 * padding, f"width: kernel {kw} exceeds padded input {wd + 2 * padding}")
    if b is not None:
        _require(b.shape == (c_out,), f"bias: expected shape ({c_out},), got {b.shape}")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    # columns laid out (n, c, kh, kw, ho, wo): one strided slice copy per kernel tap
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(w.reshape(c_out, -1), cols)
    if b is not None:
        out += b[:, None]
    out = out.reshape(n, c_out, ho, wo)
    cache = (x.shape, cols, w, b is not None, stride, padding)
    return out, cache


def conv2d_backward(dout, cache):
    """Returns (dx, dw, db); db is None when the forward had no bias."""
    x_shape, cols, w, has_bias, stride, padding = cache
    n, c, h, wd = x_shape
    c_out, _, kh, kw = w.shape
    _, _, ho, wo = dout.shape
    d3 = dout.reshape(n, c_out, ho * wo)
    dw = np.matmul(d3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = d3.sum(axis=(0, 2)) if has_bias else None

    dcols = np.matmul(w.reshape(c_out, -1).T, d3).reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
    return dx, dw, db


# ---------------------------------------------------------------- batch norm


class BNState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self):
        s = BNState(len(self.mean), self.mean.dtype)
        s.mean[:] = self.mean
        s.var[:] = self.var
        return s


def batchnorm2d(x, gamma, beta, state, train=True, eps=1e-5, momentum=0.1, update=True):
    """Per-channel batch normalization.

    In train mode the batch statistics are used and, if ``update`` is set, the
    running statistics in ``state`` move towards them with ``momentum``. Eval
    mode normalizes with the running statistics.
    """
    _check4(x)
    n, c, h, w = x.shape
    _require(gamma.shape == (c,), f"channels: input has {c}, gamma has shape {gamma.shape}")
    _require(beta.shape == (c,), f"channels: input has {c}, beta has shape {beta.shape}")
    if n * h * w == 0:
        raise ValueError("batchnorm2d: zero-size batch")
    if train:
        m = n * h * w
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        if update and state is not None:
            unbiased = var * m / (m - 1) if m > 1 else var
            state.mean *= 1 - momentum
            state.mean += momentum * mean
            state.var *= 1 - momentum
            state.var += momentum * unbiased
    else:
        mean, var = state.mean, state.var
        xc = x - mean[None, :, None, None]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv, gamma, train)


def batchnorm2d_backward(dout, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv, gamma, train = cache
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    g = gamma * inv
    if not train:
        return dout * g[None, :, None, None], dgamma, dbeta
    n, _, h, w = dout.shape
    m = n * h * w
    dx = (g / m)[None, :, None, None] * (
        m * dout - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None]
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- pointwise


@contextmanager
def record_switches():
    """Collect the on/off mask of every ReLU and the argmax of every max-pool.

    Two forward passes with equal logs run through the same linear piece of
    the network, so finite differences between them are free of kinks.
    """
    global _switch_log
    prev, _switch_log = _switch_log, []
    try:
        yield _switch_log
    finally:
        _switch_log = prev


def relu(x):
    if _switch_log is not None:
        _switch_log.append(x > 0)
    return np.maximum(x, 0)


def activation(x, kind="relu"):
    if kind == "relu":
        return relu(x), (kind, x)
    if kind == "tanh":
        y = np.tanh(x)
        return y, (kind, y)
    if kind == "identity":
        return x, (kind, None)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(dout, cache):
    kind, saved = cache
    if kind == "relu":
        # subgradient at 0 is 0
        return dout * (saved > 0)
    if kind == "tanh":
        return dout * (1 - saved * saved)
    return dout


# ---------------------------------------------------------------- pooling


def maxpool2d(x, k, stride):
    _check4(x)
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"pool window {k} exceeds input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    # np.argmax returns the first maximal index: ties go to the earliest entry
    arg = flat.argmax(axis=-1)
    if _switch_log is not None:
        _switch_log.append(arg)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, k, stride)


def maxpool2d_backward(dout, cache):
    x_shape, arg, k, stride = cache
    n, c, ho, wo = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    di, dj = np.divmod(arg, k)
    rows = np.arange(ho)[:, None] * stride + di
    cols = np.arange(wo)[None, :] * stride + dj
    nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(dx, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), dout)
    return dx


# ---------------------------------------------------------------- dense


def linear(x, weight, bias=None):
    """y = x W^T + b with W of shape (out, in)."""
    _require(x.ndim == 2, f"linear input: expected rank 2 (n, features), got rank {x.ndim}")
    _require(
        x.shape[1] == weight.shape[1],
        f"features: input has {x.shape[1]}, weight expects {weight.shape[1]}",
    )
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out, (x, weight, bias is not None)


def linear_backward(dout, cache):
    x, weight, has_bias = cache
    return dout @ weight, dout.T @ x, (dout.sum(axis=0) if has_bias else None)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient (softmax - onehot) / n."""
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels: expected shape ({n},), got {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= classes):
        bad = int(np.flatnonzero((labels < 0) | (labels >= classes))[0])
        raise ValueError(f"label {labels[bad]} at index {bad} outside [0, {classes - 1}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logz[:, None]
    idx = np.arange(n)
    loss = -logp[idx, labels].mean()
    grad = np.exp(logp)
    grad[idx, labels] -= 1
    grad /= n
    return loss, grad
