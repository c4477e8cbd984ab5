import numpy as np
import pytest

import casm.autodiff


@pytest.fixture(autouse=True)
def _strict_numerics():
    """Fail fast on any non-finite value produced by a primitive."""
    casm.autodiff.strict_checks = True
    yield
    casm.autodiff.strict_checks = False


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_batch(input_items, input_behaviors, pos_items, pos_behaviors,
               neg_items, mask, users=None):
    from casm.data import SequenceBatch

    input_items = np.asarray(input_items, dtype=np.int64)
    B = input_items.shape[0]
    return SequenceBatch(
        input_items=input_items,
        input_behaviors=np.asarray(input_behaviors, dtype=np.int64),
        pos_items=np.asarray(pos_items, dtype=np.int64),
        pos_behaviors=np.asarray(pos_behaviors, dtype=np.int64),
        neg_items=np.asarray(neg_items, dtype=np.int64),
        mask=np.asarray(mask, dtype=np.uint8),
        user_ids=np.arange(1, B + 1, dtype=np.int64)
        if users is None else np.asarray(users, dtype=np.int64),
    )


def random_batch(rng, batch=2, length=6, num_items=12, num_behaviors=2,
                 pad_max=None):
    """Left-padded random batch with consistent input/target alignment."""
    pad_max = length - 1 if pad_max is None else pad_max
    rows = dict(ii=[], ib=[], pi=[], pb=[], ni=[], m=[])
    for _ in range(batch):
        pad = int(rng.integers(0, pad_max + 1))
        n = length - pad
        items = rng.integers(1, num_items + 1, size=n + 1)
        behs = rng.integers(0, num_behaviors, size=n + 1)
        negs = rng.integers(1, num_items + 1, size=n)
        z = [0] * pad
        rows["ii"].append(z + list(items[:-1]))
        rows["ib"].append(z + list(behs[:-1]))
        rows["pi"].append(z + list(items[1:]))
        rows["pb"].append(z + list(behs[1:]))
        rows["ni"].append(z + list(negs))
        rows["m"].append(z + [1] * n)
    return make_batch(rows["ii"], rows["ib"], rows["pi"], rows["pb"],
                      rows["ni"], rows["m"])
