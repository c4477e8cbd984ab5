"""Reverse-mode differentiation core.

Dense values are plain NumPy arrays wrapped in :class:`Node`. Every
differentiable primitive appends a backward closure to a :class:`Tape`;
``Tape.backward`` replays the closures in exact reverse order of the forward
pass. Training runs in float32; gradient checking runs the same code in
float64 (finite differences are unreliable at 32-bit).

Set ``strict_checks = True`` to make every primitive validate that its output
is finite (slow; meant for tests and debugging). NaN/Inf is always treated as
an error state at the loss boundary, never silently propagated into an
optimizer step.
"""

from __future__ import annotations

import numpy as np

from casm import kernels
from casm.errors import ConfigError, NumericalError, ProtocolError

DTYPE_TRAIN = np.float32
DTYPE_CHECK = np.float64

strict_checks = False


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


class Node:
    """A value in the computation graph with a lazily allocated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None


class Param(Node):
    """A named, persistent leaf node. Gradients accumulate into ``.grad``."""

    __slots__ = ("name",)

    def __init__(self, name, value):
        super().__init__(np.ascontiguousarray(value))
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad.fill(0.0)


class Tape:
    """Ordered record of backward rules for one forward pass.

    Gradient buffers of the supplied parameters are zeroed at the start of
    each backward pass; closures then run in exact reverse order.
    """

    def __init__(self):
        self._steps = []

    def record(self, backward_fn):
        self._steps.append(backward_fn)

    def __len__(self):
        return len(self._steps)

    def backward(self, out: Node, params=()):
        for p in params:
            p.zero_grad()
        out.grad = 1.0
        for fn in reversed(self._steps):
            fn()


def _accum(node, g):
    if node.grad is None:
        node.grad = g.copy() if isinstance(g, np.ndarray) else g
    else:
        node.grad += g


def _out(tape, value, what):
    if strict_checks:
        check_finite(value, what)
    return Node(value)


# ---------------------------------------------------------------------------
# Elementary activations (pure functions, array or scalar)
# ---------------------------------------------------------------------------


def sigmoid(x):
    """Logistic 1/(1+e^-x) with stable branches for large |x|."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if out.ndim == 0 else out


def softmax_rows(m):
    """Row-wise softmax, stabilized by subtracting each row's max.

    Rows may contain large-negative mask constants; the masked entries
    underflow to exactly zero and every output row still sums to one.
    """
    m = np.asarray(m)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Differentiable primitives
# ---------------------------------------------------------------------------


def matmul(tape, a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ConfigError(
            f"matmul shape mismatch: {av.shape} x {bv.shape}"
        )
    out = _out(tape, av @ bv, "matmul")
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(a, out.grad @ bv.T)
            _accum(b, av.T @ out.grad)

        tape.record(backward)
    return out


def add(tape, a: Node, b: Node) -> Node:
    out = _out(tape, a.value + b.value, "add")
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(a, out.grad)
            _accum(b, out.grad)

        tape.record(backward)
    return out


def add_bias(tape, x: Node, b: Node) -> Node:
    """x: [N, d] plus bias b: [d], broadcast over rows."""
    out = _out(tape, x.value + b.value, "add_bias")
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(x, out.grad)
            _accum(b, out.grad.sum(axis=0))

        tape.record(backward)
    return out


def relu(tape, x: Node) -> Node:
    out = _out(tape, np.maximum(x.value, 0), "relu")
    if tape is not None:
        keep = x.value > 0

        def backward():
            if out.grad is None:
                return
            _accum(x, out.grad * keep)

        tape.record(backward)
    return out


def softmax(tape, x: Node) -> Node:
    p = softmax_rows(x.value)
    out = _out(tape, p, "softmax")
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            g = out.grad
            _accum(x, p * (g - (p * g).sum(axis=-1, keepdims=True)))

        tape.record(backward)
    return out


def embedding_lookup(tape, table: Param, ids) -> Node:
    """Rows of ``table`` selected by integer ids (one-hot product done as lookup).

    Backward is a scatter-add into the table's gradient buffer.
    """
    ids = np.asarray(ids)
    flat = ids.reshape(-1)
    out = _out(tape, table.value[flat], "embedding_lookup")
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.value)
            kernels.scatter_rows_add(table.grad, flat, out.grad)

        tape.record(backward)
    return out


def concat_cols(tape, a: Node, b: Node) -> Node:
    na = a.value.shape[1]
    out = _out(tape, np.concatenate([a.value, b.value], axis=1), "concat_cols")
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(a, out.grad[:, :na])
            _accum(b, out.grad[:, na:])

        tape.record(backward)
    return out


def add_positional(tape, x: Node, pos: Param, batch: int, length: int) -> Node:
    """x: [batch*length, d] plus the positional table pos: [length, d] per row."""
    d = x.value.shape[1]
    out_val = (x.value.reshape(batch, length, d) + pos.value).reshape(batch * length, d)
    out = _out(tape, out_val, "add_positional")
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(x, out.grad)
            _accum(pos, out.grad.reshape(batch, length, d).sum(axis=0))

        tape.record(backward)
    return out


def rowwise_dot(tape, a: Node, b: Node) -> Node:
    """Per-row dot product of two [N, d] arrays -> [N]."""
    out = _out(tape, np.einsum("nd,nd->n", a.value, b.value), "rowwise_dot")
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            g = out.grad[:, None]
            _accum(a, g * b.value)
            _accum(b, g * a.value)

        tape.record(backward)
    return out


def weighted_sum(tape, x: Node, weights) -> Node:
    """Scalar projection sum(x * weights); the usual test/loss reduction."""
    weights = np.asarray(weights)
    out = _out(tape, float((x.value * weights).sum()), "weighted_sum")
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(x, weights * out.grad)

        tape.record(backward)
    return out


def dropout(tape, x: Node, rate: float, rng) -> Node:
    """Inverted dropout; identity when rate is zero."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.value.shape) >= rate).astype(x.value.dtype)
    keep *= 1.0 / (1.0 - rate)
    out = _out(tape, x.value * keep, "dropout")
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(x, out.grad * keep)

        tape.record(backward)
    return out


def layer_norm(tape, x: Node, gain: Param, bias: Param, eps: float = 1e-8) -> Node:
    """Row-wise layer normalization with learnable gain and bias."""
    mu = x.value.mean(axis=1, keepdims=True)
    var = x.value.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv_std
    out = _out(tape, xhat * gain.value + bias.value, "layer_norm")
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            g = out.grad
            _accum(gain, (g * xhat).sum(axis=0))
            _accum(bias, g.sum(axis=0))
            dxhat = g * gain.value
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            _accum(x, inv_std * (dxhat - m1 - xhat * m2))

        tape.record(backward)
    return out


def masked_attention(tape, q: Node, k: Node, v: Node, key_mask, batch: int,
                     length: int, heads: int) -> Node:
    """Causal multi-head scaled-dot attention over left-padded sequences.

    q, k, v: [batch*length, d] nodes (full projections, heads concatenated).
    key_mask: [batch, length] in {0,1}; position t attends to positions <= t
    whose key is unpadded. Queries with no visible key produce a zero row.
    Dispatches to the active kernel backend for forward and backward.
    """
    d = q.value.shape[1]
    dh = d // heads

    def to_heads(arr):
        return np.ascontiguousarray(
            arr.reshape(batch, length, heads, dh).transpose(0, 2, 1, 3)
        )

    qh, kh, vh = to_heads(q.value), to_heads(k.value), to_heads(v.value)
    mask8 = np.ascontiguousarray(key_mask, dtype=np.uint8)
    probs, ctx = kernels.attention_forward(qh, kh, vh, mask8)
    out_val = ctx.transpose(0, 2, 1, 3).reshape(batch * length, d)
    out = _out(tape, out_val, "masked_attention")
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            d_ctx = np.ascontiguousarray(
                out.grad.reshape(batch, length, heads, dh).transpose(0, 2, 1, 3)
            )
            dq, dk, dv = kernels.attention_backward(d_ctx, probs, qh, kh, vh, mask8)

            def from_heads(arr):
                return arr.transpose(0, 2, 1, 3).reshape(batch * length, d)

            _accum(q, from_heads(dq))
            _accum(k, from_heads(dk))
            _accum(v, from_heads(dv))

        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_check(loss_fn, params, epsilon: float = 1e-5, samples: int = 200,
                      rng=None) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn()`` must run a deterministic forward+backward pass (dropout
    disabled, fixed data) at the parameters' current values, leaving fresh
    gradients in each param's ``.grad`` and returning the scalar loss.
    Evaluate in float64; finite differences are meaningless at float32.

    Returns the maximum relative error over ``samples`` randomly chosen
    parameter entries; absolute error is used where |analytic| < 1e-8.
    """
    params = list(params)
    rng = rng or np.random.default_rng(0)

    base = loss_fn()
    analytic = [p.grad.copy() for p in params]
    if loss_fn() != base:
        raise ProtocolError(
            "loss_fn is not deterministic: two forward passes disagree"
        )

    sizes = np.array([p.value.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    chosen = rng.choice(total, size=min(samples, total), replace=False)

    max_err = 0.0
    for flat in chosen:
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[pi]), params[pi].value.shape)
        orig = params[pi].value[idx]
        params[pi].value[idx] = orig + epsilon
        f_plus = loss_fn()
        params[pi].value[idx] = orig - epsilon
        f_minus = loss_fn()
        params[pi].value[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        a = float(analytic[pi][idx])
        if abs(a) < 1e-8:
            err = abs(a - numeric)
        else:
            err = abs(a - numeric) / max(abs(a), abs(numeric))
        max_err = max(max_err, err)
    return max_err
