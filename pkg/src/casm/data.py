"""Interaction ingestion, training sequences, and evaluation instances.

Input format: UTF-8 text, one interaction per line, tab-separated
``user item behavior timestamp`` (decimal integers). ``#``-prefixed lines are
comments; an optional header line ``#users=U items=I behaviors=K`` pins the
vocabulary sizes. Item id 0 is reserved for padding, so real ids start at 1.
Behavior id 0 is the dataset's primary (target) behavior by convention.
An optional sidecar ``<data>.behaviors`` maps ``behavior_id<TAB>name``.

Training sequences follow the next-item convention: the input is the user's
history minus its final element, the target sequence is the input shifted
left by one (so it ends with the final element), both left-padded to a fixed
length so the most recent interaction always sits at the last position.
"""

from __future__ import annotations

import queue
import re
import threading
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from casm.errors import DataError, ProtocolError


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    behavior_id: int
    timestamp: int


@dataclass
class InteractionLog:
    users: dict  # user_id -> list[Interaction], chronologically sorted
    num_items: int
    num_behaviors: int
    behavior_names: tuple = ()

    def num_users(self):
        return len(self.users)

    def num_interactions(self):
        return sum(len(v) for v in self.users.values())


_HEADER_RE = re.compile(r"#\s*users=(\d+)\s+items=(\d+)\s+behaviors=(\d+)\s*$")


def load_interactions(path):
    """Read a tab-separated interaction file into an InteractionLog."""
    per_user = {}
    header = None
    max_item = 0
    max_behavior = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.rstrip("\n")
            if not stripped.strip():
                continue
            if stripped.lstrip().startswith("#"):
                m = _HEADER_RE.match(stripped.strip())
                if m:
                    header = tuple(int(g) for g in m.groups())
                continue
            parts = stripped.split("\t")
            if len(parts) != 4:
                raise DataError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, "
                    f"got {len(parts)}"
                )
            try:
                user, item, behavior, ts = (int(p) for p in parts)
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: non-integer field in {parts!r}"
                ) from None
            if item == 0:
                raise DataError(
                    f"{path}:{lineno}: item id 0 is reserved for padding"
                )
            if item < 0 or user < 0 or behavior < 0 or ts < 0:
                raise DataError(f"{path}:{lineno}: negative id or timestamp")
            per_user.setdefault(user, []).append(
                Interaction(user, item, behavior, ts)
            )
            max_item = max(max_item, item)
            max_behavior = max(max_behavior, behavior)

    if header is not None:
        _, num_items, num_behaviors = header
        if max_item > num_items:
            raise DataError(
                f"{path}: item id {max_item} exceeds header items={num_items}"
            )
        if max_behavior >= num_behaviors:
            raise DataError(
                f"{path}: behavior id {max_behavior} exceeds header "
                f"behaviors={num_behaviors}"
            )
    else:
        num_items = max_item
        num_behaviors = max_behavior + 1 if per_user else 0

    for user, rows in per_user.items():
        rows.sort(key=lambda r: r.timestamp)  # stable: ties keep file order

    return InteractionLog(
        users=per_user,
        num_items=num_items,
        num_behaviors=num_behaviors,
        behavior_names=_load_behavior_names(path),
    )


def _load_behavior_names(data_path):
    sidecar = str(data_path) + ".behaviors"
    try:
        fh = open(sidecar, encoding="utf-8")
    except OSError:
        return ()
    with fh:
        named = {}
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            bid, _, name = line.rstrip("\n").partition("\t")
            named[int(bid)] = name
    return tuple(named[i] for i in sorted(named))


def write_interactions(path, log, header=True):
    """Emit a log in canonical order (users ascending, per-user sort order)."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(
                f"#users={log.num_users()} items={log.num_items} "
                f"behaviors={log.num_behaviors}\n"
            )
        for user in sorted(log.users):
            for r in log.users[user]:
                fh.write(f"{r.user_id}\t{r.item_id}\t{r.behavior_id}\t{r.timestamp}\n")


@dataclass
class EvalSeed:
    """A held-out final interaction plus the user's training history."""

    user_id: int
    items: tuple
    behaviors: tuple
    pos_item: int
    pos_behavior: int


@dataclass
class Split:
    train: InteractionLog
    test: list  # list[EvalSeed]
    val: list  # list[EvalSeed]; empty unless validation was requested


def leave_one_out_split(log, validation=False):
    """Withhold each user's chronologically last interaction for testing.

    Users with fewer than two interactions stay in the training log but are
    not evaluated. With ``validation=True`` the second-to-last interaction is
    additionally withheld as a validation positive (users need >= 3 events).
    """
    if not log.users:
        raise DataError("empty interaction log")
    train_users = {}
    test = []
    val = []
    for user in sorted(log.users):
        rows = log.users[user]
        if len(rows) < 2:
            train_users[user] = list(rows)
            continue
        holdout = 2 if validation and len(rows) >= 3 else 1
        history = rows[:-holdout]
        train_users[user] = list(history)
        if holdout == 2:
            v = rows[-2]
            val.append(
                EvalSeed(
                    user, tuple(r.item_id for r in history),
                    tuple(r.behavior_id for r in history),
                    v.item_id, v.behavior_id,
                )
            )
            history = rows[:-1]
        t = rows[-1]
        test.append(
            EvalSeed(
                user, tuple(r.item_id for r in history),
                tuple(r.behavior_id for r in history),
                t.item_id, t.behavior_id,
            )
        )
    train = InteractionLog(
        users=train_users,
        num_items=log.num_items,
        num_behaviors=log.num_behaviors,
        behavior_names=log.behavior_names,
    )
    return Split(train=train, test=test, val=val)


@dataclass
class SequenceBatch:
    input_items: np.ndarray  # [B, L] int64, 0 = padding
    input_behaviors: np.ndarray  # [B, L] int64
    pos_items: np.ndarray  # [B, L] int64
    pos_behaviors: np.ndarray  # [B, L] int64
    neg_items: np.ndarray  # [B, L] int64, 0 where masked
    mask: np.ndarray  # [B, L] uint8, 1 = valid step
    user_ids: np.ndarray  # [B] int64


def _sample_negatives(rng, num_items, forbidden, n):
    """n uniform draws from [1, num_items] avoiding ``forbidden``."""
    if len(forbidden) >= num_items:
        raise ProtocolError(
            "cannot sample a negative item: user history covers the vocabulary"
        )
    negs = rng.integers(1, num_items + 1, size=n)
    for i in range(n):
        while int(negs[i]) in forbidden:
            negs[i] = rng.integers(1, num_items + 1)
    return negs.tolist()


def user_training_row(history, max_len, num_items, rng):
    """Build one user's padded (input, target, negative) row.

    Returns None when the history is too short to form a step (single
    interaction: empty input means an all-zero mask, so the row is dropped).
    """
    if len(history) < 2:
        return None
    items = [r.item_id for r in history]
    behaviors = [r.behavior_id for r in history]
    seq_in = items[:-1][-max_len:]
    beh_in = behaviors[:-1][-max_len:]
    seq_pos = items[1:][-max_len:]
    beh_pos = behaviors[1:][-max_len:]
    n = len(seq_in)
    pad = max_len - n
    forbidden = set(items)
    negs = _sample_negatives(rng, num_items, forbidden, n)
    return (
        [0] * pad + seq_in,
        [0] * pad + beh_in,
        [0] * pad + seq_pos,
        [0] * pad + beh_pos,
        [0] * pad + negs,
        [0] * pad + [1] * n,
    )


def build_sequences(train, max_len, seed, epoch, batch_size):
    """Yield SequenceBatch objects for one epoch.

    Negatives are drawn uniformly from [1, num_items] excluding the user's
    full history and resampled every epoch. All randomness is derived from
    (seed, epoch, user_id), so the stream is reproducible and independent of
    batching or any consumer-side threading.
    """
    if max_len < 2:
        raise ProtocolError(f"max_len={max_len} must be >= 2")
    order = sorted(train.users)
    np.random.default_rng([seed, epoch]).shuffle(order)

    rows = []
    users = []
    for user in order:
        rng = np.random.default_rng([seed, epoch, user])
        row = user_training_row(train.users[user], max_len, train.num_items, rng)
        if row is None:
            continue
        rows.append(row)
        users.append(user)
        if len(rows) == batch_size:
            yield _assemble(rows, users)
            rows, users = [], []
    if rows:
        yield _assemble(rows, users)


def _assemble(rows, users):
    cols = list(zip(*rows))
    arr = [np.asarray(c, dtype=np.int64) for c in cols[:5]]
    mask = np.asarray(cols[5], dtype=np.uint8)
    return SequenceBatch(
        input_items=arr[0], input_behaviors=arr[1], pos_items=arr[2],
        pos_behaviors=arr[3], neg_items=arr[4], mask=mask,
        user_ids=np.asarray(users, dtype=np.int64),
    )


@dataclass
class EvalInstance:
    user_id: int
    items: np.ndarray  # [L] int64, left-padded input sequence
    behaviors: np.ndarray  # [L] int64
    mask: np.ndarray  # [L] uint8
    pos_item: int
    target_behavior: int
    candidates: np.ndarray  # [100] int64: the positive plus 99 negatives
    pos_index: int
    primary_count: int  # user's primary-behavior interaction count


def sample_eval_candidates(history_items, positive, num_items, rng, user_id=None):
    """The positive plus 99 distinct negatives outside the user's history.

    Candidate order is randomized; returns (candidates, positive_index).
    """
    excluded = set(history_items)
    excluded.add(positive)
    pool = np.setdiff1d(
        np.arange(1, num_items + 1, dtype=np.int64),
        np.fromiter(excluded, dtype=np.int64),
        assume_unique=False,
    )
    if pool.size < 99:
        raise ProtocolError(
            f"user {user_id}: only {pool.size} items outside the history; "
            f"99 negatives required"
        )
    negs = rng.choice(pool, size=99, replace=False)
    candidates = np.concatenate([[positive], negs])
    perm = rng.permutation(100)
    candidates = candidates[perm]
    pos_index = int(np.nonzero(perm == 0)[0][0])
    return candidates, pos_index


def build_eval_instances(split, max_len, seed, target_behavior_only=True,
                         primary_behavior=0, which="test"):
    """Materialize evaluation instances with per-user candidate sampling.

    The candidate RNG is derived from (seed, user_id) so instance sets are
    identical regardless of iteration order or worker count.
    """
    seeds = split.test if which == "test" else split.val
    num_items = split.train.num_items
    instances = []
    for es in seeds:
        if target_behavior_only and es.pos_behavior != primary_behavior:
            continue
        rng = np.random.default_rng([seed, es.user_id])
        candidates, pos_index = sample_eval_candidates(
            es.items, es.pos_item, num_items, rng, user_id=es.user_id
        )
        items = np.zeros(max_len, dtype=np.int64)
        behaviors = np.zeros(max_len, dtype=np.int64)
        mask = np.zeros(max_len, dtype=np.uint8)
        tail_items = es.items[-max_len:]
        tail_beh = es.behaviors[-max_len:]
        n = len(tail_items)
        if n:
            items[max_len - n:] = tail_items
            behaviors[max_len - n:] = tail_beh
            mask[max_len - n:] = 1
        primary_count = sum(1 for b in es.behaviors if b == primary_behavior)
        primary_count += int(es.pos_behavior == primary_behavior)
        instances.append(
            EvalInstance(
                user_id=es.user_id, items=items, behaviors=behaviors, mask=mask,
                pos_item=es.pos_item, target_behavior=es.pos_behavior,
                candidates=candidates, pos_index=pos_index,
                primary_count=primary_count,
            )
        )
    return instances


def prefetch(iterable, depth):
    """Hand batches across a bounded queue from a producer thread.

    Each batch is immutable once emitted, and all sampling randomness is
    fixed upstream, so prefetching never changes the stream.
    """
    if depth <= 0:
        yield from iterable
        return
    q = queue.Queue(maxsize=depth)
    done = object()

    def producer():
        try:
            for item in iterable:
                q.put(item)
            q.put(done)
        except BaseException as exc:  # surface worker errors to the consumer
            q.put(exc)

    thread = threading.Thread(target=producer, daemon=True)
    thread.start()
    while True:
        item = q.get()
        if item is done:
            break
        if isinstance(item, BaseException):
            raise item
        yield item
    thread.join()
