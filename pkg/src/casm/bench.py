"""Training-batch runtime benchmark across sequence lengths and backends.

Each cell times forward + loss + backward for a full batch (the optimizer
step is excluded) after warmup batches, reporting mean seconds per batch.
By default every available kernel backend is measured so the compiled
extension can be compared against the NumPy fallback.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from casm import autodiff as ad
from casm import kernels
from casm import model as modelmod
from casm import training
from casm.data import SequenceBatch


@dataclass
class BenchRow:
    backend: str
    seq_len: int
    mean_seconds: float
    timed_batches: int


def _synthetic_batch(batch_size, seq_len, num_items, num_behaviors, seed):
    rng = np.random.default_rng([seed, seq_len])
    shape = (batch_size, seq_len)
    return SequenceBatch(
        input_items=rng.integers(1, num_items + 1, size=shape),
        input_behaviors=rng.integers(0, num_behaviors, size=shape),
        pos_items=rng.integers(1, num_items + 1, size=shape),
        pos_behaviors=rng.integers(0, num_behaviors, size=shape),
        neg_items=rng.integers(1, num_items + 1, size=shape),
        mask=np.ones(shape, dtype=np.uint8),
        user_ids=np.arange(batch_size, dtype=np.int64),
    )


def _one_step(params, batch, hp, drop_rng):
    tape = ad.Tape()
    out = modelmod.forward(params, batch, tape, train=True, drop_rng=drop_rng)
    loss = training.weighted_bce_loss(out, batch.pos_behaviors, batch.mask,
                                      hp.alpha, hp.beta)
    tape.backward(loss, params.all())
    return loss.value


def run_bench(cfg):
    """Measure every configured sequence length on the selected backends."""
    hp = cfg.hp
    if cfg.bench_backends == "all":
        backends = kernels.available_backends()
    else:
        backends = [cfg.bench_backends]
    num_behaviors = len(hp.alpha)
    rows = []
    previous = kernels.active_backend()
    try:
        for backend in backends:
            kernels.use_backend(backend)
            for seq_len in cfg.bench_lengths:
                bench_hp = dataclasses.replace(hp, max_len=seq_len)
                params = modelmod.ModelParams(
                    cfg.bench_items, num_behaviors, bench_hp
                )
                batch = _synthetic_batch(
                    hp.batch_size, seq_len, cfg.bench_items, num_behaviors,
                    hp.seed,
                )
                drop_rng = np.random.default_rng([hp.seed, 0xBE2C])
                for _ in range(cfg.bench_warmup):
                    _one_step(params, batch, bench_hp, drop_rng)
                started = time.perf_counter()
                for _ in range(cfg.bench_batches):
                    _one_step(params, batch, bench_hp, drop_rng)
                elapsed = time.perf_counter() - started
                rows.append(
                    BenchRow(backend, seq_len, elapsed / cfg.bench_batches,
                             cfg.bench_batches)
                )
    finally:
        kernels.use_backend(previous)
    return rows


def bench_csv_lines(rows):
    lines = ["backend,seq_len,mean_seconds_per_batch,timed_batches"]
    for r in rows:
        lines.append(
            f"{r.backend},{r.seq_len},{r.mean_seconds:.6f},{r.timed_batches}"
        )
    return lines


def bench_table(rows):
    """Plain-text table, one line per (backend, seq_len)."""
    lines = [f"{'backend':<10} {'seq_len':>7} {'sec/batch':>12}"]
    for r in rows:
        lines.append(f"{r.backend:<10} {r.seq_len:>7} {r.mean_seconds:>12.4f}")
    return lines
