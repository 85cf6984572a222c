"""Neural building blocks on top of the tensor engine.

Everything here is a composition of tensor primitives, so gradients come
for free and are covered by the finite-difference checks in the tests.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import (
    Tensor,
    as_tensor,
    concat,
    log_softmax,
    matmul,
    mul,
    reshape,
    softmax,
    swapaxes,
    take_per_row,
    tanh,
)

MASKED_SCORE = -1e9  # additive pre-softmax bias; underflows to exactly zero weight
LAYER_NORM_EPS = 1e-5


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    if bias is not None:
        out = out + bias
    return out


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    c = math.sqrt(2.0 / math.pi)
    inner = mul(x + mul(mul(x, mul(x, x)), 0.044715), c)
    return mul(mul(x, tanh(inner) + 1.0), 0.5)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    eps sits inside the square root, so constant rows map to zero instead
    of dividing by zero.
    """
    if x.shape[-1] < 2:
        raise ValueError(f"layer_norm needs a last-axis extent >= 2, got {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return centered * inv * gain + bias


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-softmax of the target class over unmasked rows."""
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects (T, K) logits, got {logits.shape}")
    t = logits.shape[0]
    targets = np.asarray(targets, dtype=np.int64)
    if mask is None:
        mask = np.ones(t, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (t,):
        raise ValueError(f"mask length {mask.shape} != logit rows {t}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("all positions are masked")
    picked = take_per_row(log_softmax(logits, axis=-1), targets)
    total = (picked * mask.astype(np.float64)).sum()
    return -(total * (1.0 / n))


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Absolute sinusoidal position table: sin on even dims, cos on odd."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = (dim + 1) // 2
    i = np.arange(half, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)[:, : dim // 2]
    return table


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    params: dict[str, Tensor],
    key_mask: np.ndarray | None = None,
    return_internals: bool = False,
):
    """Scaled dot-product attention with `heads` parallel heads.

    `params` holds the four projections as wq/bq, wk, wv/bv, wo/bo.  The
    key projection carries no bias: softmax is invariant to a score shift
    shared across keys, so a key bias would be non-identifiable.
    `key_mask` marks valid key positions; masked keys get a large negative
    score bias so their weight underflows to zero.
    """
    tq, d = q.shape
    if d % heads != 0:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    if k.ndim != 2 or v.ndim != 2 or k.shape[1] != d or v.shape[1] != d:
        raise ValueError(f"q/k/v dim mismatch: {q.shape}, {k.shape}, {v.shape}")
    tk = k.shape[0]
    if v.shape[0] != tk:
        raise ValueError(f"key/value length mismatch: {k.shape} vs {v.shape}")
    if tk == 0:
        raise ValueError("empty reference: attention needs at least one key")
    dh = d // heads

    def split_heads(x, t):
        return swapaxes(reshape(x, (t, heads, dh)), 0, 1)  # (H, t, dh)

    qh = split_heads(linear(q, params["wq"], params["bq"]), tq)
    kh = split_heads(linear(k, params["wk"]), tk)
    vh = split_heads(linear(v, params["wv"], params["bv"]), tk)

    scores = mul(matmul(qh, swapaxes(kh, 1, 2)), 1.0 / math.sqrt(dh))  # (H, Tq, Tk)
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (tk,):
            raise ValueError(f"key_mask length {key_mask.shape} != {tk}")
        if not key_mask.any():
            raise ValueError("empty reference: all keys masked")
        scores = scores + np.where(key_mask, 0.0, MASKED_SCORE)[None, None, :]
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, vh)  # (H, Tq, dh)
    merged = reshape(swapaxes(ctx, 0, 1), (tq, d))
    out = linear(merged, params["wo"], params["bo"])
    if return_internals:
        return out, weights.data, ctx.data, vh.data
    return out
