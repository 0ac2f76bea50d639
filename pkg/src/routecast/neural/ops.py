"""Forward/backward primitives in float64 numpy.

Each *_fwd returns (output, cache); the matching *_bwd consumes the cache and
the upstream gradient.  Backward math follows the standard derivations; the
finite-difference harness in gradcheck.py is the ground truth for all of it.
"""

from __future__ import annotations

import numpy as np


def _as64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# -- convolution -------------------------------------------------------------


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Strided (N, C, Xo, Yo, Zo, k, k, k) view over the padded input."""
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    return v[:, :, ::stride, ::stride, ::stride]


def conv3d_fwd(x, w, b, stride: int = 1):
    """'same'-padded cubic convolution, kernel size 1 or 3, stride 1 or 2."""
    x, w, b = _as64(x), _as64(w), _as64(b)
    k = w.shape[2]
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    v = _windows(xp, k, stride)
    y = np.tensordot(v, w, axes=[(1, 5, 6, 7), (1, 2, 3, 4)])
    y = np.moveaxis(y, -1, 1) + b[None, :, None, None, None]
    cache = (xp, w, stride, p, x.shape)
    return y, cache


def conv3d_bwd(cache, dy):
    xp, w, stride, p, x_shape = cache
    dy = _as64(dy)
    k = w.shape[2]
    xo, yo, zo = dy.shape[2:]
    v = _windows(xp, k, stride)
    db = dy.sum(axis=(0, 2, 3, 4))
    dw = np.tensordot(dy, v, axes=[(0, 2, 3, 4), (0, 2, 3, 4)])
    dcol = np.tensordot(dy, w, axes=[(1,), (0,)])  # (N, Xo, Yo, Zo, C, k, k, k)
    dxp = np.zeros_like(xp)
    for di in range(k):
        for dj in range(k):
            for dk in range(k):
                sl = dcol[..., di, dj, dk]  # (N, Xo, Yo, Zo, C)
                dxp[
                    :,
                    :,
                    di : di + stride * xo : stride,
                    dj : dj + stride * yo : stride,
                    dk : dk + stride * zo : stride,
                ] += np.moveaxis(sl, -1, 1)
    n, c, x_, y_, z_ = x_shape
    dx = dxp[:, :, p : p + x_, p : p + y_, p : p + z_]
    return dx, dw, db


# -- normalization -----------------------------------------------------------


def groupnorm_fwd(x, gamma, beta, groups: int, eps: float = 1e-5):
    x, gamma, beta = _as64(x), _as64(gamma), _as64(beta)
    n, c = x.shape[:2]
    assert c % groups == 0, f"channels {c} not divisible by {groups} groups"
    xg = x.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * ivar
    bshape = (1, c) + (1,) * (x.ndim - 2)
    y = xhat.reshape(x.shape) * gamma.reshape(bshape) + beta.reshape(bshape)
    return y, (xhat, ivar, gamma, x.shape, groups)


def groupnorm_bwd(cache, dy):
    xhat, ivar, gamma, x_shape, groups = cache
    dy = _as64(dy)
    n, c = x_shape[:2]
    reduce_axes = (0,) + tuple(range(2, len(x_shape)))
    xhat_full = xhat.reshape(x_shape)
    dgamma = (dy * xhat_full).sum(axis=reduce_axes)
    dbeta = dy.sum(axis=reduce_axes)
    bshape = (1, c) + (1,) * (len(x_shape) - 2)
    dxhat = (dy * gamma.reshape(bshape)).reshape(n, groups, -1)
    m = dxhat.shape[-1]
    dx = (
        ivar
        / m
        * (m * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    )
    return dx.reshape(x_shape), dgamma, dbeta


# -- activations -------------------------------------------------------------


def elu_fwd(x):
    x = _as64(x)
    ex = np.exp(np.minimum(x, 0.0))
    y = np.where(x > 0, x, ex - 1.0)
    return y, np.where(x > 0, 1.0, ex)


def elu_bwd(cache, dy):
    return _as64(dy) * cache


def relu_fwd(x):
    x = _as64(x)
    mask = x > 0
    return x * mask, mask


def relu_bwd(cache, dy):
    return _as64(dy) * cache


def sigmoid_fwd(x):
    x = _as64(x)
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return y, y


def sigmoid_bwd(cache, dy):
    y = cache
    return _as64(dy) * y * (1.0 - y)


def softplus(x):
    return np.logaddexp(0.0, _as64(x))


# -- pooling and resampling --------------------------------------------------


def global_avg_fwd(x):
    """(N, C, X, Y, Z) -> (N, C) spatial mean."""
    x = _as64(x)
    return x.mean(axis=(2, 3, 4)), x.shape


def global_avg_bwd(cache, dy):
    shape = cache
    m = shape[2] * shape[3] * shape[4]
    return np.broadcast_to(_as64(dy)[:, :, None, None, None], shape) / m


def global_max_fwd(x):
    """(N, C, X, Y, Z) -> (N, C) spatial max; ties break to first index."""
    x = _as64(x)
    flat = x.reshape(x.shape[0], x.shape[1], -1)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def global_max_bwd(cache, dy):
    idx, shape = cache
    dflat = np.zeros((shape[0], shape[1], shape[2] * shape[3] * shape[4]))
    np.put_along_axis(dflat, idx[..., None], _as64(dy)[..., None], axis=-1)
    return dflat.reshape(shape)


def channel_mean_fwd(x):
    """(N, C, ...) -> (N, 1, ...) mean over channels."""
    x = _as64(x)
    return x.mean(axis=1, keepdims=True), x.shape


def channel_mean_bwd(cache, dy):
    shape = cache
    return np.broadcast_to(_as64(dy), shape) / shape[1]


def channel_max_fwd(x):
    x = _as64(x)
    idx = x.argmax(axis=1)[:, None]
    y = np.take_along_axis(x, idx, axis=1)
    return y, (idx, x.shape)


def channel_max_bwd(cache, dy):
    idx, shape = cache
    dx = np.zeros(shape)
    np.put_along_axis(dx, idx, _as64(dy), axis=1)
    return dx


def upsample2_fwd(x):
    """Nearest-neighbor 2x upsampling along all spatial axes."""
    x = _as64(x)
    y = x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
    return y, x.shape


def upsample2_bwd(cache, dy):
    n, c, x_, y_, z_ = cache
    dy = _as64(dy)
    return dy.reshape(n, c, x_, 2, y_, 2, z_, 2).sum(axis=(3, 5, 7))


# -- dense layer -------------------------------------------------------------


def linear_fwd(x, w, b):
    """x: (N, F), w: (O, F), b: (O,)."""
    x, w, b = _as64(x), _as64(w), _as64(b)
    return x @ w.T + b, (x, w)


def linear_bwd(cache, dy):
    x, w = cache
    dy = _as64(dy)
    return dy @ w, dy.T @ x, dy.sum(axis=0)


# -- losses ------------------------------------------------------------------


def mse_mean_fwd(pred, target):
    """Mean of squared differences over all elements."""
    pred, target = _as64(pred), _as64(target)
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, diff


def mse_mean_bwd(cache, dloss=1.0):
    diff = cache
    return (2.0 / diff.size) * diff * dloss


def bce_real_fake_fwd(logit_real, logit_fake):
    """-mean(log sig(l_r)) - mean(log(1 - sig(l_f))), in stable form."""
    lr, lf = _as64(logit_real), _as64(logit_fake)
    loss = float(np.mean(softplus(-lr)) + np.mean(softplus(lf)))
    return loss, (lr, lf)


def bce_real_fake_bwd(cache, dloss=1.0):
    lr, lf = cache
    sr, _ = sigmoid_fwd(lr)
    sf, _ = sigmoid_fwd(lf)
    return (sr - 1.0) / lr.size * dloss, sf / lf.size * dloss


def bce_fool_fwd(logit_fake):
    """-mean(log sig(l_f)): the generator-side objective."""
    lf = _as64(logit_fake)
    return float(np.mean(softplus(-lf))), lf


def bce_fool_bwd(cache, dloss=1.0):
    lf = cache
    sf, _ = sigmoid_fwd(lf)
    return (sf - 1.0) / lf.size * dloss


# -- broadcasting helper -----------------------------------------------------


def reduce_to(shape, arr):
    """Sum ``arr`` down to ``shape`` (inverse of numpy broadcasting)."""
    arr = _as64(arr)
    while arr.ndim > len(shape):
        arr = arr.sum(axis=0)
    for ax, (want, have) in enumerate(zip(shape, arr.shape)):
        if want == 1 and have != 1:
            arr = arr.sum(axis=ax, keepdims=True)
    return arr
