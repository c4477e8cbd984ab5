"""Synthetic interaction generators for desk-scale experiments and tests.

``cycle_log`` builds a tiny memorizable world: every user walks the same
global successor cycle, so the next item is a deterministic function of the
current one. A working model should overfit it to near-perfect HR@1.

``aux_signal_log`` builds a world where auxiliary behaviors carry the
predictive signal: all users walk a shared item cycle, but only a small
fraction of events are the primary behavior. Training on the primary
behavior alone sees too few transitions to learn the cycle; weighting the
auxiliary behaviors in exposes it, so auxiliary-aware weightings should win
the ranking comparison by a clear margin.
"""

from __future__ import annotations

import numpy as np

from casm.data import Interaction, InteractionLog


def cycle_log(num_users=50, num_items=20, min_len=8, max_len=14, seed=0):
    """Deterministic next-item rule: item -> (item % num_items) + 1."""
    rng = np.random.default_rng([seed, 0xC1C])
    users = {}
    for u in range(1, num_users + 1):
        n = int(rng.integers(min_len, max_len + 1))
        item = int(rng.integers(1, num_items + 1))
        rows = []
        for t in range(n):
            rows.append(Interaction(u, item, 0, t))
            item = item % num_items + 1
        users[u] = rows
    return InteractionLog(
        users=users, num_items=num_items, num_behaviors=1,
        behavior_names=("buy",),
    )


def aux_signal_log(num_users=150, num_items=200, min_len=16, max_len=24,
                   primary_prob=0.15, seed=0):
    """Shared item cycle where most events carry auxiliary behaviors.

    Behaviors: 0 = buy (primary, sparse), 1 = cart, 2 = fav, 3 = view
    (dominant). The final event of every user is forced to the primary
    behavior so that every user is evaluated under the target-behavior
    filter.
    """
    rng = np.random.default_rng([seed, 0xA0C5])
    perm = rng.permutation(np.arange(1, num_items + 1))
    succ = np.zeros(num_items + 1, dtype=np.int64)
    for i in range(num_items):
        succ[perm[i]] = perm[(i + 1) % num_items]

    aux_probs = np.array([0.1, 0.1, 0.8])  # cart, fav, view given non-primary
    users = {}
    for u in range(1, num_users + 1):
        n = int(rng.integers(min_len, max_len + 1))
        item = int(perm[rng.integers(0, num_items)])
        rows = []
        for t in range(n):
            if t == n - 1 or rng.random() < primary_prob:
                behavior = 0
            else:
                behavior = 1 + int(rng.choice(3, p=aux_probs))
            rows.append(Interaction(u, item, behavior, t))
            item = int(succ[item])
        users[u] = rows
    return InteractionLog(
        users=users, num_items=num_items, num_behaviors=4,
        behavior_names=("buy", "cart", "fav", "pv"),
    )


def random_log(num_users=30, num_items=100, num_behaviors=3, min_len=1,
               max_len=12, seed=0):
    """Uniform noise log; handy for property tests and round-trips."""
    rng = np.random.default_rng([seed, 0x4AD])
    users = {}
    for u in range(1, num_users + 1):
        n = int(rng.integers(min_len, max_len + 1))
        rows = [
            Interaction(
                u, int(rng.integers(1, num_items + 1)),
                int(rng.integers(0, num_behaviors)), t,
            )
            for t in range(n)
        ]
        users[u] = rows
    return InteractionLog(
        users=users, num_items=num_items, num_behaviors=num_behaviors,
    )
