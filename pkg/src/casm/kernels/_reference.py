"""NumPy implementations of the hot kernels.

This is the fallback backend selected when the compiled extension is not
built. Shapes: q/k/v and gradients are [B, H, L, dh]; attention probabilities
are [B, H, L, L]; key_mask is [B, L] uint8.
"""

import numpy as np

MASK_FILL = -1e9


def _allowed(key_mask, length):
    causal = np.tril(np.ones((length, length), dtype=bool))
    return causal[None, :, :] & key_mask.astype(bool)[:, None, :]


def attention_forward(q, k, v, key_mask):
    """Causal + key-padding masked softmax attention.

    Returns (probs, ctx). Disallowed entries hold exact zeros; a query row
    with no visible key (fully padded prefix) is all zeros.
    """
    B, H, L, dh = q.shape
    scale = np.asarray(1.0 / np.sqrt(dh), dtype=q.dtype)
    logits = (q @ k.transpose(0, 1, 3, 2)) * scale
    allowed = _allowed(key_mask, L)
    logits = logits + np.where(allowed, 0.0, MASK_FILL).astype(q.dtype)[:, None, :, :]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    alive = allowed.any(axis=-1)  # [B, L]
    probs *= alive[:, None, :, None].astype(q.dtype)
    ctx = probs @ v
    return probs, ctx


def attention_backward(d_ctx, probs, q, k, v, key_mask):
    """Gradients of attention_forward w.r.t. q, k, v given d(ctx)."""
    dh = q.shape[3]
    scale = np.asarray(1.0 / np.sqrt(dh), dtype=q.dtype)
    d_probs = d_ctx @ v.transpose(0, 1, 3, 2)
    d_logits = probs * (d_probs - (probs * d_probs).sum(axis=-1, keepdims=True))
    dq = (d_logits @ k) * scale
    dk = (d_logits.transpose(0, 1, 3, 2) @ q) * scale
    dv = probs.transpose(0, 1, 3, 2) @ d_ctx
    return dq, dk, dv


def scatter_rows_add(table, ids, rows):
    """table[ids[i]] += rows[i] with repeated ids accumulating."""
    np.add.at(table, ids, rows)
