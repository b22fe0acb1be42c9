"""Forward/backward primitives for a small pre-LN transformer in float64.

Each ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd`` takes the
upstream gradient and the cache and returns input gradients (plus parameter
gradients where the layer owns parameters).
"""
from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
MASK_VALUE = -1e30
_GELU_A = np.sqrt(2.0 / np.pi)
_GELU_B = 0.044715


def layernorm_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layernorm_bwd(dy, cache):
    xhat, rstd, g = cache
    red = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(red)
    db = dy.sum(red)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def gelu_fwd(x):
    u = _GELU_A * (x + _GELU_B * x * x * x)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(dy, cache):
    x, t = cache
    du = _GELU_A * (1.0 + 3.0 * _GELU_B * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax(s, axis=-1):
    s = s - s.max(axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis, keepdims=True)


def log_softmax(s, axis=-1):
    s = s - s.max(axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis, keepdims=True))


def _split(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention_fwd(xq, xkv, w, mask, n_heads):
    """Multi-head attention; ``w`` holds ``wq, wk, wv, wo``; ``mask`` is additive.

    ``mask`` broadcasts against scores of shape ``(B, H, Tq, Tk)``.
    """
    q = _split(xq @ w["wq"], n_heads)
    k = _split(xkv @ w["wk"], n_heads)
    v = _split(xkv @ w["wv"], n_heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    p = softmax(q @ k.transpose(0, 1, 3, 2) * scale + mask)
    o = _merge(p @ v)
    return o @ w["wo"], (xq, xkv, q, k, v, p, o, scale)


def attention_bwd(dout, cache, w, n_heads):
    xq, xkv, q, k, v, p, o, scale = cache
    grads = {"wo": outer_sum(o, dout)}
    do = _split(dout @ w["wo"].T, n_heads)
    dp = do @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ do
    ds = p * (dp - (dp * p).sum(-1, keepdims=True)) * scale
    dq = _merge(ds @ k)
    dk = _merge(ds.transpose(0, 1, 3, 2) @ q)
    dv = _merge(dv)
    grads["wq"] = outer_sum(xq, dq)
    grads["wk"] = outer_sum(xkv, dk)
    grads["wv"] = outer_sum(xkv, dv)
    dxq = dq @ w["wq"].T
    dxkv = dk @ w["wk"].T + dv @ w["wv"].T
    return dxq, dxkv, grads


def outer_sum(a, b):
    """``sum_rows a[row, :, None] * b[row, None, :]`` over all leading axes."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def ffn_fwd(x, w):
    hpre = x @ w["w1"] + w["b1"]
    h, gcache = gelu_fwd(hpre)
    return h @ w["w2"] + w["b2"], (x, h, gcache)


def ffn_bwd(dy, cache, w):
    x, h, gcache = cache
    red = tuple(range(dy.ndim - 1))
    grads = {"w2": outer_sum(h, dy), "b2": dy.sum(red)}
    dhpre = gelu_bwd(dy @ w["w2"].T, gcache)
    grads["w1"] = outer_sum(x, dhpre)
    grads["b1"] = dhpre.sum(red)
    return dhpre @ w["w1"].T, grads
