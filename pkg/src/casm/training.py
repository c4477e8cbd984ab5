"""Weighted binary cross-entropy objective, Adam, and the epoch loop.

The loss sums, over every unmasked step, the behavior-weighted positive
log-likelihood plus the beta-weighted negative term:

    loss = -(1/N) * sum_t [ alpha[b_t] * log(s_t^+) + beta * log(1 - s_t^-) ]

where b_t is the behavior of the positive target at step t and N is the
number of unmasked steps in the batch. The mean normalization only rescales
the effective learning rate; the optimum is unchanged. Logs are clamped at
1e-24 so saturated scores cannot produce infinities.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from casm import autodiff as ad
from casm import data as datamod
from casm import model as modelmod
from casm.config import Hyperparams
from casm.errors import NumericalError

LOG_CLAMP = 1e-24


def weighted_bce_loss(out, pos_behaviors, mask, alpha, beta):
    """Build the scalar loss node for one batch's ForwardOutput."""
    pos = out.pos_scores.reshape(-1)
    neg = out.neg_scores.reshape(-1)
    for name, s in (("positive", pos), ("negative", neg)):
        if np.any(~np.isfinite(s)) or np.any(s < 0.0) or np.any(s > 1.0):
            raise NumericalError(f"{name} scores escaped (0, 1); upstream bug")

    m = np.asarray(mask, dtype=pos.dtype).reshape(-1)
    count = m.sum()
    if count == 0:
        return ad.Node(0.0)
    a = np.asarray(alpha, dtype=pos.dtype)[np.asarray(pos_behaviors).reshape(-1)]
    a = a * m
    bm = beta * m
    total = -(a * np.log(np.maximum(pos, LOG_CLAMP))
              + bm * np.log(np.maximum(1.0 - neg, LOG_CLAMP))).sum()
    loss = ad.Node(float(total / count))

    tape = out.tape
    if tape is not None:
        pos_logits, neg_logits = out.pos_logits, out.neg_logits

        def backward():
            if loss.grad is None:
                return
            g = loss.grad / count
            ad._accum(pos_logits, (a * (pos - 1.0)) * g)
            ad._accum(neg_logits, (bm * neg) * g)

        tape.record(backward)
    return loss


@dataclass
class AdamState:
    """First/second moment accumulators per parameter plus the step counter."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m={p.name: np.zeros_like(p.value) for p in params},
            v={p.name: np.zeros_like(p.value) for p in params},
        )


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update.

    ``params`` is either a ModelParams (whose padding row is re-zeroed after
    the step) or a plain iterable of Param leaves.
    """
    model = params if isinstance(params, modelmod.ModelParams) else None
    leaves = params.all() if model is not None else list(params)
    state.t += 1
    b1t = 1.0 - beta1 ** state.t
    b2t = 1.0 - beta2 ** state.t
    for p in leaves:
        m = state.m[p.name]
        v = state.v[p.name]
        g = p.grad
        m[:] = beta1 * m + (1.0 - beta1) * g
        v[:] = beta2 * v + (1.0 - beta2) * (g * g)
        p.value -= lr * (m / b1t) / (np.sqrt(v / b2t) + eps)
    if model is not None:
        model["item_table"].value[0, :] = 0.0


def clip_gradients(params, max_norm):
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


@dataclass
class TraceRow:
    epoch: int
    step: int
    loss: float


@dataclass
class TrainResult:
    params: modelmod.ModelParams
    trace: list
    val_hr: list = field(default_factory=list)  # (epoch, HR@10) when enabled
    seconds: float = 0.0


def train(log, hp: Hyperparams, val_instances=None, threads=0, log_fn=None,
          checkpoint_fn=None):
    """Train on an interaction log (already split; targets included).

    Negatives are freshly sampled every epoch, dropout is active only here,
    and everything is driven by hp.seed, so identical (seed, data, hp) yield
    bitwise-identical parameters on one build and machine.
    """
    hp.validate(num_behaviors=log.num_behaviors)
    params = modelmod.ModelParams(log.num_items, log.num_behaviors, hp)
    state = AdamState.for_params(params.all())
    drop_rng = np.random.default_rng([hp.seed, 0xD20])
    trace = []
    val_hr = []
    started = time.perf_counter()

    for epoch in range(hp.epochs):
        batches = datamod.build_sequences(
            log, hp.max_len, hp.seed, epoch, hp.batch_size
        )
        for step, batch in enumerate(datamod.prefetch(batches, threads)):
            tape = ad.Tape()
            try:
                out = modelmod.forward(params, batch, tape, train=True,
                                       drop_rng=drop_rng)
                loss = weighted_bce_loss(out, batch.pos_behaviors, batch.mask,
                                         hp.alpha, hp.beta)
            except NumericalError as exc:
                raise NumericalError(
                    f"{exc} [epoch {epoch} step {step}, "
                    f"learning_rate={hp.learning_rate}]"
                ) from None
            if not np.isfinite(loss.value):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(learning_rate={hp.learning_rate}); aborting"
                )
            tape.backward(loss, params.all())
            if hp.grad_clip > 0:
                clip_gradients(params.all(), hp.grad_clip)
            adam_step(params, state, hp.learning_rate)
            trace.append(TraceRow(epoch, step, loss.value))
        if val_instances:
            hr = _validation_hr(params, val_instances)
            val_hr.append((epoch, hr))
            if log_fn:
                log_fn(f"epoch {epoch}: loss={trace[-1].loss:.4f} val_hr@10={hr:.4f}")
        elif log_fn:
            log_fn(f"epoch {epoch}: loss={trace[-1].loss:.4f}")
        if checkpoint_fn:
            checkpoint_fn(epoch, params)

    return TrainResult(params=params, trace=trace, val_hr=val_hr,
                       seconds=time.perf_counter() - started)


def _validation_hr(params, instances, n=10):
    from casm import evaluation

    scores = modelmod.CandidateScorer(params)(instances)
    hits = 0
    for i, inst in enumerate(instances):
        rank = evaluation.rank_of_positive(scores[i], inst.pos_index)
        hits += evaluation.hr_at_n(rank, n)
    return hits / len(instances)


def training_target_accuracy(params, log, hp):
    """HR@1 of training targets under the protocol's candidate structure.

    Diagnostic for overfit checks on tiny synthetic sets: for each unmasked
    step, the target competes against every item outside the user's history
    (matching how negatives and evaluation candidates are drawn everywhere
    else); a hit means the target strictly outranks all of them. Intended
    for small vocabularies.
    """
    hits = 0
    total = 0
    all_items = np.arange(1, log.num_items + 1, dtype=np.int64)
    for batch in datamod.build_sequences(log, hp.max_len, hp.seed, 0,
                                         hp.batch_size):
        B, L = batch.input_items.shape
        z = modelmod.encode(params, batch.input_items, batch.input_behaviors,
                            batch.mask).value.reshape(B, L, hp.embed_dim)
        history = {
            int(u): {r.item_id for r in log.users[int(u)]}
            for u in batch.user_ids
        }
        for behavior in range(log.num_behaviors):
            sel = (batch.mask == 1) & (batch.pos_behaviors == behavior)
            if not sel.any():
                continue
            beh = np.full(log.num_items, behavior, dtype=np.int64)
            q = modelmod.embed_fused(params, all_items, beh).value
            scores = z[sel] @ q.T
            rows, cols = np.nonzero(sel)
            for i, (b, t) in enumerate(zip(rows, cols)):
                target = int(batch.pos_items[b, t])
                others = [
                    j - 1 for j in all_items
                    if j != target and j not in history[int(batch.user_ids[b])]
                ]
                hits += int(scores[i, target - 1] > scores[i, others].max())
                total += 1
    return hits / max(total, 1)
