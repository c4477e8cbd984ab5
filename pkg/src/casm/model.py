"""Forward pass: embedding fusion, causal self-attention blocks, scoring.

Each interaction is embedded twice (an item-table lookup plus bias, and a
behavior-table lookup plus bias), then the two vectors are concatenated
column-wise and projected back to the model width. A learnable positional
table is added to input sequences only; target items reuse the same shared
embed/fuse layers without the positional term, and the score for a target is
the sigmoid of its dot product with the encoded sequence position.

Blocks default to the residual + pre-activation layer-norm + dropout
arrangement standard for this family of sequence encoders; ``plain_block``
drops all three and leaves bare attention followed by the position-wise FFN.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from casm import autodiff as ad
from casm.config import Hyperparams
from casm.errors import DataError

CHECKPOINT_MAGIC = b"CASM"
CHECKPOINT_VERSION = 1


def _xavier(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class ModelParams:
    """All learnable tensors plus their gradient buffers, in a fixed order."""

    def __init__(self, num_items, num_behaviors, hp: Hyperparams,
                 dtype=np.float32):
        self.num_items = num_items
        self.num_behaviors = num_behaviors
        self.hp = hp
        self.dtype = np.dtype(dtype)
        d = hp.embed_dim
        rng = np.random.default_rng([hp.seed, 0xCA5])

        def emb(shape):
            return rng.uniform(-0.01, 0.01, size=shape).astype(dtype)

        p = {}
        p["item_table"] = emb((num_items + 1, d))
        p["item_table"][0, :] = 0.0  # row 0 = padding, frozen at zero
        p["item_bias"] = np.zeros(d, dtype=dtype)
        p["ctx_table"] = emb((num_behaviors, d))
        p["ctx_bias"] = np.zeros(d, dtype=dtype)
        p["fuse_w"] = _xavier(rng, 2 * d, d, dtype)
        p["fuse_b"] = np.zeros(d, dtype=dtype)
        p["pos_table"] = emb((hp.max_len, d))
        for i in range(hp.blocks):
            p[f"b{i}.wq"] = _xavier(rng, d, d, dtype)
            p[f"b{i}.wk"] = _xavier(rng, d, d, dtype)
            p[f"b{i}.wv"] = _xavier(rng, d, d, dtype)
            p[f"b{i}.ffn_w1"] = _xavier(rng, d, d, dtype)
            p[f"b{i}.ffn_b1"] = np.zeros(d, dtype=dtype)
            p[f"b{i}.ffn_w2"] = _xavier(rng, d, d, dtype)
            p[f"b{i}.ffn_b2"] = np.zeros(d, dtype=dtype)
            if not hp.plain_block:
                p[f"b{i}.ln1_g"] = np.ones(d, dtype=dtype)
                p[f"b{i}.ln1_b"] = np.zeros(d, dtype=dtype)
                p[f"b{i}.ln2_g"] = np.ones(d, dtype=dtype)
                p[f"b{i}.ln2_b"] = np.zeros(d, dtype=dtype)
        if not hp.plain_block:
            p["final_ln_g"] = np.ones(d, dtype=dtype)
            p["final_ln_b"] = np.zeros(d, dtype=dtype)

        self._params = {name: ad.Param(name, val) for name, val in p.items()}

    def __getitem__(self, name):
        return self._params[name]

    def all(self):
        return list(self._params.values())

    def named(self):
        return dict(self._params)

    def zero_grads(self):
        for p in self._params.values():
            p.zero_grad()


@dataclass
class ForwardOutput:
    """Per-step encodings and scores; masked positions must be excluded from
    any downstream reduction."""

    z: np.ndarray  # [B, L, d]
    pos_scores: np.ndarray  # [B, L] in (0, 1)
    neg_scores: np.ndarray  # [B, L] in (0, 1)
    pos_logits: ad.Node
    neg_logits: ad.Node
    mask: np.ndarray  # [B, L] uint8
    tape: ad.Tape


def _check_ids(ids, limit, what):
    if ids.size and int(ids.max()) > limit:
        raise DataError(f"{what} id {int(ids.max())} exceeds maximum {limit}")
    if ids.size and int(ids.min()) < 0:
        raise DataError(f"negative {what} id")


def embed_items(params, ids, tape=None):
    """Item-table rows plus bias; padding id 0 maps to the zero row."""
    ids = np.asarray(ids).reshape(-1)
    _check_ids(ids, params.num_items, "item")
    v = ad.embedding_lookup(tape, params["item_table"], ids)
    return ad.add_bias(tape, v, params["item_bias"])


def embed_contexts(params, behaviors, tape=None):
    behaviors = np.asarray(behaviors).reshape(-1)
    _check_ids(behaviors, params.num_behaviors - 1, "behavior")
    c = ad.embedding_lookup(tape, params["ctx_table"], behaviors)
    return ad.add_bias(tape, c, params["ctx_bias"])


def fuse(params, v, c, tape=None):
    """Column-wise concat of item and context embeddings, projected to width d."""
    r = ad.concat_cols(tape, v, c)
    return ad.add_bias(tape, ad.matmul(tape, r, params["fuse_w"]), params["fuse_b"])


def embed_fused(params, ids, behaviors, tape=None):
    """Shared embed+fuse used for both sequence inputs and scoring targets."""
    v = embed_items(params, ids, tape)
    if not params.hp.use_context:
        return v
    c = embed_contexts(params, behaviors, tape)
    return fuse(params, v, c, tape)


def _ffn(params, i, x, tape):
    h = ad.add_bias(tape, ad.matmul(tape, x, params[f"b{i}.ffn_w1"]),
                    params[f"b{i}.ffn_b1"])
    h = ad.relu(tape, h)
    return ad.add_bias(tape, ad.matmul(tape, h, params[f"b{i}.ffn_w2"]),
                       params[f"b{i}.ffn_b2"])


def attention_block(params, i, x, key_mask, batch, length, tape=None,
                    train=False, drop_rng=None):
    """One causal multi-head self-attention block over [batch*length, d] rows."""
    hp = params.hp
    if hp.plain_block:
        q = ad.matmul(tape, x, params[f"b{i}.wq"])
        k = ad.matmul(tape, x, params[f"b{i}.wk"])
        v = ad.matmul(tape, x, params[f"b{i}.wv"])
        a = ad.masked_attention(tape, q, k, v, key_mask, batch, length, hp.heads)
        return _ffn(params, i, a, tape)

    h = ad.layer_norm(tape, x, params[f"b{i}.ln1_g"], params[f"b{i}.ln1_b"])
    q = ad.matmul(tape, h, params[f"b{i}.wq"])
    k = ad.matmul(tape, h, params[f"b{i}.wk"])
    v = ad.matmul(tape, h, params[f"b{i}.wv"])
    a = ad.masked_attention(tape, q, k, v, key_mask, batch, length, hp.heads)
    if train:
        a = ad.dropout(tape, a, hp.dropout, drop_rng)
    x = ad.add(tape, x, a)

    h = ad.layer_norm(tape, x, params[f"b{i}.ln2_g"], params[f"b{i}.ln2_b"])
    f = _ffn(params, i, h, tape)
    if train:
        f = ad.dropout(tape, f, hp.dropout, drop_rng)
    return ad.add(tape, x, f)


def encode(params, items, behaviors, key_mask, tape=None, train=False,
           drop_rng=None):
    """Run the full input pipeline; returns a [batch*length, d] node."""
    hp = params.hp
    batch, length = items.shape
    x = embed_fused(params, items, behaviors, tape)
    x = ad.add_positional(tape, x, params["pos_table"], batch, length)
    if train:
        x = ad.dropout(tape, x, hp.dropout, drop_rng)
    for i in range(hp.blocks):
        x = attention_block(params, i, x, key_mask, batch, length, tape,
                            train, drop_rng)
    if not hp.plain_block:
        x = ad.layer_norm(tape, x, params["final_ln_g"], params["final_ln_b"])
    return x


def score(z, q_target):
    """Sigmoid of the dot product between an encoding and a target embedding."""
    return ad.sigmoid(float(np.dot(z, q_target)))


def forward(params, batch, tape=None, train=False, drop_rng=None):
    """Encode a SequenceBatch and score its positive/negative targets."""
    hp = params.hp
    B, L = batch.input_items.shape
    z = encode(params, batch.input_items, batch.input_behaviors, batch.mask,
               tape, train, drop_rng)
    # Negative targets reuse the positive step's behavior so the comparison
    # is context-matched.
    q_pos = embed_fused(params, batch.pos_items, batch.pos_behaviors, tape)
    q_neg = embed_fused(params, batch.neg_items, batch.pos_behaviors, tape)
    pos_logits = ad.rowwise_dot(tape, z, q_pos)
    neg_logits = ad.rowwise_dot(tape, z, q_neg)
    return ForwardOutput(
        z=z.value.reshape(B, L, hp.embed_dim),
        pos_scores=ad.sigmoid(pos_logits.value).reshape(B, L),
        neg_scores=ad.sigmoid(neg_logits.value).reshape(B, L),
        pos_logits=pos_logits,
        neg_logits=neg_logits,
        mask=batch.mask,
        tape=tape,
    )


class CandidateScorer:
    """Read-only candidate scoring against the last sequence position."""

    def __init__(self, params, chunk=512):
        self.params = params
        self.chunk = chunk

    def __call__(self, instances):
        """Score each instance's candidate list; returns [U, C] scores."""
        out = []
        for lo in range(0, len(instances), self.chunk):
            out.append(self._score_chunk(instances[lo:lo + self.chunk]))
        return np.concatenate(out, axis=0) if out else np.zeros((0, 0))

    def _score_chunk(self, chunk):
        items = np.stack([inst.items for inst in chunk])
        behaviors = np.stack([inst.behaviors for inst in chunk])
        mask = np.stack([inst.mask for inst in chunk])
        U, L = items.shape
        d = self.params.hp.embed_dim
        z = encode(self.params, items, behaviors, mask).value.reshape(U, L, d)
        z_last = z[:, -1, :]
        cands = np.stack([inst.candidates for inst in chunk])  # [U, C]
        C = cands.shape[1]
        beh = np.repeat([inst.target_behavior for inst in chunk], C)
        q = embed_fused(self.params, cands.reshape(-1), beh).value
        logits = np.einsum("ucd,ud->uc", q.reshape(U, C, d), z_last)
        return ad.sigmoid(logits)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
# Layout (little-endian): magic "CASM", u32 version, u32 header length, then
# the UTF-8 JSON header, then each parameter's raw C-order bytes in the
# header's manifest order. The header stores hyperparameters, vocabulary
# sizes, dtype, and per-parameter name/shape. See docs/checkpoint-format.md.


def save_checkpoint(path, params):
    manifest = [
        {"name": p.name, "shape": list(p.value.shape)} for p in params.all()
    ]
    header = {
        "dtype": params.dtype.name,
        "hyperparams": params.hp.to_dict(),
        "num_behaviors": params.num_behaviors,
        "num_items": params.num_items,
        "params": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in params.all():
            fh.write(np.ascontiguousarray(p.value).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        hp = Hyperparams.from_dict(header["hyperparams"])
        dtype = np.dtype(header["dtype"])
        params = ModelParams(header["num_items"], header["num_behaviors"], hp,
                             dtype=dtype)
        names = {p.name for p in params.all()}
        if names != {m["name"] for m in header["params"]}:
            raise DataError(f"{path}: parameter manifest mismatch")
        for m in header["params"]:
            shape = tuple(m["shape"])
            n = int(np.prod(shape)) * dtype.itemsize
            arr = np.frombuffer(fh.read(n), dtype=dtype).reshape(shape)
            target = params[m["name"]]
            if target.value.shape != shape:
                raise DataError(
                    f"{path}: shape mismatch for {m['name']}: "
                    f"{shape} vs {target.value.shape}"
                )
            target.value = arr.copy()
    return params
