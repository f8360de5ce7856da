"""Small neural-network toolkit with hand-written backward passes.

Each op is a forward function returning ``(out, cache)`` and a matching
``*_backward(dout, cache)`` returning input and parameter gradients. Arrays
are 2-D ``(T, D)``; computations run in whatever float dtype they receive.
"""

from __future__ import annotations

import functools
import math
from typing import Dict, Tuple

import numpy as np

from .errors import InputError, ShapeError

LN_EPS = 1e-5

Params = Dict[str, np.ndarray]


def _check_2d(x: np.ndarray, name: str = "x"):
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")


def linear(x, W, b):
    _check_2d(x)
    if W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, W {W.shape}, b {b.shape} incompatible")
    return x @ W + b


def linear_backward(dy, x, W):
    """Gradients ``(dx, dW, db)`` of ``y = x W + b``."""
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0.0)


def layer_norm(x, gain, bias, eps: float = LN_EPS):
    _check_2d(x)
    if x.shape[1] < 2:
        raise ShapeError("layer_norm needs at least 2 columns")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dy, cache):
    xhat, inv, gain = cache
    D = xhat.shape[1]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    dx = inv / D * (
        D * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    return dx, dgain, dbias


def softmax(z, axis: int = -1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def multi_head_self_attention(x, p: Params, n_heads: int):
    """Full (unmasked) self-attention. ``p`` holds ``wq, bq, ..., wo, bo``."""
    _check_2d(x)
    T, D = x.shape
    if n_heads < 1 or D % n_heads:
        raise InputError(f"model dim {D} is not divisible by {n_heads} heads")
    dk = D // n_heads
    q = x @ p["wq"] + p["bq"]
    k = x @ p["wk"] + p["bk"]
    v = x @ p["wv"] + p["bv"]
    # (H, T, dk)
    qh = q.reshape(T, n_heads, dk).transpose(1, 0, 2)
    kh = k.reshape(T, n_heads, dk).transpose(1, 0, 2)
    vh = v.reshape(T, n_heads, dk).transpose(1, 0, 2)
    scale = 1.0 / math.sqrt(dk)
    attn = softmax(qh @ kh.transpose(0, 2, 1) * scale, axis=-1)
    ctx = (attn @ vh).transpose(1, 0, 2).reshape(T, D)
    out = ctx @ p["wo"] + p["bo"]
    return out, (x, qh, kh, vh, attn, ctx, scale)


def multi_head_self_attention_backward(dout, cache, p: Params):
    x, qh, kh, vh, attn, ctx, scale = cache
    T, D = x.shape
    H, _, dk = qh.shape
    g = {}
    g["wo"] = ctx.T @ dout
    g["bo"] = dout.sum(axis=0)
    dctx = (dout @ p["wo"].T).reshape(T, H, dk).transpose(1, 0, 2)
    dattn = dctx @ vh.transpose(0, 2, 1)
    dvh = attn.transpose(0, 2, 1) @ dctx
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 2, 1) @ qh

    def merge(t):
        return t.transpose(1, 0, 2).reshape(T, D)

    dq, dk_, dv = merge(dqh), merge(dkh), merge(dvh)
    g["wq"], g["bq"] = x.T @ dq, dq.sum(axis=0)
    g["wk"], g["bk"] = x.T @ dk_, dk_.sum(axis=0)
    g["wv"], g["bv"] = x.T @ dv, dv.sum(axis=0)
    dx = dq @ p["wq"].T + dk_ @ p["wk"].T + dv @ p["wv"].T
    return dx, g


def attention_weights(x, p: Params, n_heads: int) -> np.ndarray:
    """Per-head attention matrices ``(H, T, T)``, for inspection."""
    return multi_head_self_attention(x, p, n_heads)[1][4]


def _im2col(x, k: int):
    T, C = x.shape
    pad = k // 2
    # (T, k*C), tap-major; written directly rather than via np.pad, which
    # dominates the cost at small T
    cols = np.zeros((T, k * C), dtype=x.dtype)
    for j in range(k):
        s = j - pad
        lo, hi = max(0, -s), min(T, T - s)
        if hi > lo:
            cols[lo:hi, j * C : (j + 1) * C] = x[lo + s : hi + s]
    return cols


def conv1d(x, W, b):
    """Same-padded convolution over time. ``W`` has shape ``(k, Din, Dout)``."""
    _check_2d(x)
    k, din, dout = W.shape
    if k % 2 == 0:
        raise InputError(f"kernel size must be odd, got {k}")
    if x.shape[1] != din or b.shape != (dout,):
        raise ShapeError(f"conv1d: x {x.shape}, W {W.shape}, b {b.shape} incompatible")
    cols = _im2col(x, k)
    return cols @ W.reshape(k * din, dout) + b, (cols, W)


def conv1d_backward(dy, cache):
    cols, W = cache
    k, din, dout = W.shape
    T = dy.shape[0]
    dW = (cols.T @ dy).reshape(k, din, dout)
    db = dy.sum(axis=0)
    dcols = dy @ W.reshape(k * din, dout).T
    pad = k // 2
    dxp = np.zeros((T + 2 * pad, din), dtype=dy.dtype)
    for j in range(k):
        dxp[j : j + T] += dcols[:, j * din : (j + 1) * din]
    return dxp[pad : pad + T], dW, db


def position_encoding(T: int, D: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal table ``(T, D)``; cached and read-only, so callers must not write to it."""
    if D % 2:
        raise InputError(f"position encoding needs an even width, got {D}")
    return _position_table(int(T), int(D), np.dtype(dtype))


@functools.lru_cache(maxsize=64)
def _position_table(T: int, D: int, dtype: np.dtype) -> np.ndarray:
    pos = np.arange(T, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, D, 2, dtype=np.float64) / D)
    pe = np.empty((T, D))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    pe = pe.astype(dtype, copy=False)
    pe.flags.writeable = False
    return pe


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Adam:
    """Bias-corrected Adam over a dict of parameter arrays (updated in place)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Params = {}
        self.v: Params = {}

    def step(self, params: Params, grads: Params) -> None:
        for name, g in grads.items():
            if name not in params:
                raise ShapeError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ShapeError(
                    f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}"
                )
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params: Params, grads: Params, state: Adam) -> Tuple[Params, Adam]:
    state.step(params, grads)
    return params, state
