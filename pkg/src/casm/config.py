"""Hyperparameters, dataset presets, and run configuration.

Config files are flat UTF-8 ``key = value`` text; ``#`` starts a comment.
Resolution precedence: command-line flags override file values, file values
override preset values, presets override built-in defaults. The fully
resolved configuration is echoed into the run directory before any work
starts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from casm.errors import ConfigError


@dataclass
class Hyperparams:
    """Everything that determines the trained model, apart from the data."""

    embed_dim: int = 64
    heads: int = 1
    blocks: int = 1
    max_len: int = 50
    learning_rate: float = 0.001
    dropout: float = 0.2
    batch_size: int = 128
    epochs: int = 100
    alpha: tuple = (1.0,)
    beta: float = 1.0
    seed: int = 0
    use_context: bool = True
    plain_block: bool = False
    eval_target_behavior_only: bool = True
    validation_split: bool = False
    primary_behavior: int = 0
    grad_clip: float = 0.0  # 0 disables; kept for NaN-recovery experiments

    def validate(self, num_behaviors=None):
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim={self.embed_dim} not divisible by heads={self.heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout={self.dropout} outside [0, 1)")
        if self.beta < 0:
            raise ConfigError(f"beta={self.beta} must be >= 0")
        if any(not 0.0 <= a <= 1.0 for a in self.alpha):
            raise ConfigError(f"alpha={self.alpha} entries must lie in [0, 1]")
        if num_behaviors is not None and len(self.alpha) != num_behaviors:
            raise ConfigError(
                f"alpha has {len(self.alpha)} entries but the dataset declares "
                f"{num_behaviors} behaviors"
            )

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["alpha"] = list(self.alpha)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["alpha"] = tuple(d["alpha"])
        return cls(**d)


# Tuned settings shipped per dataset. alpha is indexed by behavior id; the
# expected id order is recorded in behavior_names with the primary behavior
# first (id 0).
PRESETS = {
    "taobao": dict(
        embed_dim=85, max_len=150, dropout=0.25, learning_rate=0.0005,
        alpha=(0.7, 0.1, 0.1, 0.1), beta=1.1,
        behavior_names=("buy", "cart", "fav", "pv"),
    ),
    "tianchi": dict(
        embed_dim=50, max_len=70, dropout=0.5, learning_rate=0.0007,
        alpha=(0.7, 0.1, 0.1, 0.1), beta=1.1,
        behavior_names=("buy", "cart", "fav", "pv"),
    ),
    "yelp": dict(
        embed_dim=50, max_len=150, dropout=0.5, learning_rate=0.0003,
        alpha=(0.3, 0.3, 0.2, 0.2), beta=1.1,
        behavior_names=("like", "tip", "neutral", "dislike"),
    ),
    "movielens": dict(
        embed_dim=70, max_len=70, dropout=0.4, learning_rate=0.0006,
        alpha=(0.9, 0.1, 0.0), beta=1.1,
        behavior_names=("like", "neutral", "dislike"),
    ),
}

# Nine-row behavior-weight grids used by `ablate` when no explicit grid is
# configured, keyed by behavior count.
DEFAULT_ALPHA_GRIDS = {
    4: (
        (1.0, 0.0, 0.0, 0.0),
        (0.9, 0.1, 0.0, 0.0),
        (0.8, 0.1, 0.1, 0.0),
        (0.7, 0.1, 0.1, 0.1),
        (0.6, 0.2, 0.1, 0.1),
        (0.5, 0.2, 0.2, 0.1),
        (0.4, 0.3, 0.2, 0.1),
        (0.3, 0.3, 0.3, 0.1),
        (0.3, 0.3, 0.2, 0.2),
    ),
    3: (
        (1.0, 0.0, 0.0),
        (0.9, 0.1, 0.0),
        (0.8, 0.1, 0.1),
        (0.7, 0.1, 0.1),
        (0.6, 0.2, 0.1),
        (0.5, 0.2, 0.2),
        (0.4, 0.3, 0.2),
        (0.3, 0.3, 0.3),
        (0.3, 0.3, 0.2),
    ),
}


@dataclass
class RunConfig:
    command: str = ""
    data: str = ""
    out: str = "runs/latest"
    preset: str = ""
    checkpoint: str = ""  # defaults to <out>/checkpoint.bin
    behavior_names: tuple = ()
    metrics_n: tuple = (10,)
    eval_seeds: tuple = (0, 1, 2)
    bucket_edges: tuple = (5, 10, 20, 50)
    bench_lengths: tuple = (20, 50, 100, 200, 400)
    bench_warmup: int = 2
    bench_batches: int = 3
    bench_items: int = 10000
    bench_backends: str = "all"  # "all" or a backend name
    threads: int = 0
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    ablation_alphas: tuple = ()  # tuple of alpha vectors
    ablation_context: tuple = ()  # tuple of bools
    hp: Hyperparams = field(default_factory=Hyperparams)


_TUPLE_FLOAT_KEYS = {"alpha"}
_TUPLE_INT_KEYS = {"metrics_n", "eval_seeds", "bucket_edges", "bench_lengths"}
_TUPLE_STR_KEYS = {"behavior_names"}


def _parse_bool(key, raw):
    low = str(raw).strip().lower()
    if low in ("1", "true", "on", "yes"):
        return True
    if low in ("0", "false", "off", "no"):
        return False
    raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")


def _convert(key, raw, target_type):
    if isinstance(raw, target_type) and not isinstance(raw, str):
        return raw
    try:
        if target_type is bool:
            return _parse_bool(key, raw)
        if target_type is int:
            return int(str(raw).strip())
        if target_type is float:
            return float(str(raw).strip())
        if target_type is tuple:
            if isinstance(raw, tuple):
                return raw
            parts = [p.strip() for p in str(raw).split(",") if p.strip()]
            if key in _TUPLE_FLOAT_KEYS:
                return tuple(float(p) for p in parts)
            if key in _TUPLE_INT_KEYS:
                return tuple(int(p) for p in parts)
            if key in _TUPLE_STR_KEYS:
                return tuple(parts)
            return tuple(parts)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r}: {exc}") from None


def _field_types():
    hp_fields = {f.name: f.type for f in dataclasses.fields(Hyperparams)}
    run_fields = {
        f.name: f.type for f in dataclasses.fields(RunConfig) if f.name != "hp"
    }
    return hp_fields, run_fields


def read_config_file(path):
    """Parse a flat key = value file into a dict of raw strings."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            values[key.strip()] = raw.strip()
    return values


def _parse_alpha_grid(raw):
    # "1,0,0,0; 0.7,0.1,0.1,0.1" -> ((1,0,0,0), (0.7,0.1,0.1,0.1))
    rows = [r.strip() for r in str(raw).split(";") if r.strip()]
    return tuple(tuple(float(p) for p in r.split(",")) for r in rows)


def resolve_config(command="", preset="", config_file=None, overrides=None):
    """Merge defaults <- preset <- config file <- overrides into a RunConfig."""
    hp_types, run_types = _field_types()
    hp_values = {}
    run_values = {"command": command}

    def apply(source, source_name):
        for key, raw in source.items():
            if key == "ablation_alphas":
                run_values[key] = (
                    raw if isinstance(raw, tuple) else _parse_alpha_grid(raw)
                )
            elif key == "ablation_context":
                parts = (
                    raw if isinstance(raw, tuple)
                    else tuple(p.strip() for p in str(raw).split(",") if p.strip())
                )
                run_values[key] = tuple(
                    p if isinstance(p, bool) else _parse_bool(key, p) for p in parts
                )
            elif key in hp_types:
                target = type(getattr(Hyperparams(), key))
                hp_values[key] = _convert(key, raw, target)
            elif key in run_types:
                target = type(getattr(RunConfig(), key))
                run_values[key] = _convert(key, raw, target)
            else:
                raise ConfigError(f"unknown config key {key!r} (from {source_name})")

    if preset:
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {preset!r}; available: {sorted(PRESETS)}"
            )
        apply(PRESETS[preset], f"preset {preset}")
        run_values["preset"] = preset
    if config_file:
        apply(read_config_file(config_file), config_file)
    if overrides:
        apply(overrides, "command line")

    cfg = RunConfig(hp=Hyperparams(**hp_values), **run_values)
    cfg.hp.validate()
    return cfg


def config_to_text(cfg, extra=None):
    """Serialize the resolved config as sorted key = value lines."""
    rows = {}
    for f in dataclasses.fields(RunConfig):
        if f.name == "hp":
            continue
        val = getattr(cfg, f.name)
        rows[f.name] = val
    for f in dataclasses.fields(Hyperparams):
        rows[f.name] = getattr(cfg.hp, f.name)
    if extra:
        rows.update(extra)

    def fmt(v):
        if isinstance(v, tuple):
            if v and isinstance(v[0], tuple):
                return "; ".join(",".join(str(x) for x in row) for row in v)
            return ",".join(str(x) for x in v)
        return str(v)

    return "".join(f"{k} = {fmt(rows[k])}\n" for k in sorted(rows))
