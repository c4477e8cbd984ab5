"""Command-line entry point: train / eval / ablate / bench / inspect-data.

Every run directory receives the fully resolved configuration (including the
seed, a checksum of the input data, and the code version) before any work
starts, which is sufficient to reproduce the run bitwise on the same build
and machine. Exit codes: 0 success, 2 configuration, 3 data, 4 numerical,
5 protocol errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import sys
from pathlib import Path

import numpy as np

import casm
from casm import bench as benchmod
from casm import data as datamod
from casm import evaluation, kernels, training
from casm import model as modelmod
from casm.config import DEFAULT_ALPHA_GRIDS, resolve_config, config_to_text
from casm.errors import CasmError, ConfigError


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="casm",
        description="Context-aware sequential multi-behavior recommender",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("train", "train a model and write a checkpoint"),
        ("eval", "rank held-out items with a trained checkpoint"),
        ("ablate", "train/evaluate a grid of behavior weightings"),
        ("bench", "time training batches across sequence lengths"),
        ("inspect-data", "print dataset statistics"),
    ):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--preset", default=None,
                       help="dataset preset: taobao, tianchi, yelp, movielens")
        p.add_argument("--data", default=None, help="interaction file")
        p.add_argument("--out", default=None, help="run output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--alpha", default=None,
                       help="comma-separated behavior weights")
        p.add_argument("--beta", type=float, default=None)
        p.add_argument("--no-context", action="store_true",
                       help="ablate the behavior-context features")
        p.add_argument("--plain-block", action="store_true",
                       help="bare attention blocks: no residual/norm/dropout")
        p.add_argument("--threads", type=int, default=None,
                       help="data prefetch workers (0 = synchronous)")
        p.add_argument("--lengths", default=None,
                       help="bench sequence lengths, comma-separated")
    return parser


def _overrides_from_args(args):
    ov = {}
    if args.data is not None:
        ov["data"] = args.data
    if args.out is not None:
        ov["out"] = args.out
    if args.seed is not None:
        ov["seed"] = args.seed
    if args.alpha is not None:
        ov["alpha"] = args.alpha
    if args.beta is not None:
        ov["beta"] = args.beta
    if args.no_context:
        ov["use_context"] = False
    if args.plain_block:
        ov["plain_block"] = True
    if args.threads is not None:
        ov["threads"] = args.threads
    if args.lengths is not None:
        ov["bench_lengths"] = args.lengths
    return ov


def _data_checksum(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()


def _start_run(cfg, need_data=True):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {
        "code_version": f"casm {casm.__version__} ({kernels.active_backend()})",
        "data_checksum": _data_checksum(cfg.data) if need_data and cfg.data
        else "none",
    }
    (out / "run_config.txt").write_text(config_to_text(cfg, extra),
                                        encoding="utf-8")
    return out


def _load_split(cfg, check_alpha=True):
    if not cfg.data:
        raise ConfigError("--data (or a config 'data' key) is required")
    log = datamod.load_interactions(cfg.data)
    cfg.hp.validate(num_behaviors=log.num_behaviors if check_alpha else None)
    return log, datamod.leave_one_out_split(
        log, validation=cfg.hp.validation_split
    )


def _write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _instances_by_seed(split, cfg):
    return {
        seed: datamod.build_eval_instances(
            split, cfg.hp.max_len, seed,
            target_behavior_only=cfg.hp.eval_target_behavior_only,
            primary_behavior=cfg.hp.primary_behavior,
        )
        for seed in cfg.eval_seeds
    }


def cmd_train(cfg):
    out = _start_run(cfg)
    log, split = _load_split(cfg)
    val_instances = None
    if cfg.hp.validation_split and split.val:
        val_split = dataclasses.replace(split, test=split.val)
        val_instances = datamod.build_eval_instances(
            val_split, cfg.hp.max_len, cfg.hp.seed,
            target_behavior_only=cfg.hp.eval_target_behavior_only,
            primary_behavior=cfg.hp.primary_behavior, which="test",
        )

    def checkpoint_fn(epoch, params):
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            modelmod.save_checkpoint(out / f"checkpoint_epoch{epoch + 1}.bin",
                                     params)

    result = training.train(
        split.train, cfg.hp, val_instances=val_instances,
        threads=cfg.threads, log_fn=print, checkpoint_fn=checkpoint_fn,
    )
    modelmod.save_checkpoint(out / "checkpoint.bin", result.params)
    _write_lines(
        out / "loss_trace.csv",
        ["epoch,step,loss"]
        + [f"{r.epoch},{r.step},{r.loss:.6f}" for r in result.trace],
    )
    print(f"trained {cfg.hp.epochs} epochs in {result.seconds:.1f}s; "
          f"checkpoint at {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(cfg):
    out = _start_run(cfg)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "checkpoint.bin"
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    params = modelmod.load_checkpoint(ckpt)
    # Sequence geometry and flags come from the checkpoint.
    cfg.hp = params.hp
    _, split = _load_split(cfg)
    result = evaluation.evaluate(
        modelmod.CandidateScorer(params),
        _instances_by_seed(split, cfg),
        n_list=cfg.metrics_n,
    )
    _write_lines(out / "results.csv", evaluation.result_csv_lines(result))
    _write_lines(out / "per_user.csv", evaluation.per_user_csv_lines(result))
    strat = evaluation.evaluate_stratified(result, cfg.bucket_edges)
    _write_lines(out / "stratified.csv",
                 evaluation.stratified_csv_lines(strat, cfg.metrics_n))
    for line in evaluation.result_csv_lines(result):
        print(line)
    return 0


def _ablation_cells(cfg, num_behaviors):
    cells = []
    alphas = cfg.ablation_alphas
    if not alphas and not cfg.ablation_context:
        alphas = DEFAULT_ALPHA_GRIDS.get(num_behaviors, ())
        if not alphas:
            raise ConfigError(
                f"no built-in alpha grid for {num_behaviors} behaviors; "
                f"set ablation_alphas"
            )
    for vec in alphas:
        if len(vec) != num_behaviors:
            raise ConfigError(
                f"ablation_alphas row {vec} length != behaviors ({num_behaviors})"
            )
        cells.append(("", {"alpha": tuple(vec)}))
    for flag in cfg.ablation_context:
        cells.append((f"context={'on' if flag else 'off'}",
                      {"use_context": flag}))
    return cells


def cmd_ablate(cfg):
    out = _start_run(cfg)
    # The base alpha may be a placeholder here; each grid cell's hyperparams
    # are validated against the dataset when its training run starts.
    _, split = _load_split(cfg, check_alpha=False)
    num_behaviors = split.train.num_behaviors
    cells = _ablation_cells(cfg, num_behaviors)
    names = cfg.behavior_names or split.train.behavior_names
    if len(names) != num_behaviors:
        names = tuple(f"b{i}" for i in range(num_behaviors))

    # Validate every cell before any training starts, so a bad grid fails
    # fast instead of after some cells have already run.
    for variant, overrides in cells:
        try:
            dataclasses.replace(cfg.hp, **overrides).validate(num_behaviors)
        except ConfigError as exc:
            label = variant or "alpha=" + ",".join(
                str(a) for a in overrides.get("alpha", cfg.hp.alpha)
            )
            raise ConfigError(f"ablation cell {label}: {exc}") from None

    n = cfg.metrics_n[0]
    header = ["variant"] + [f"alpha_{nm}" for nm in names] + [
        f"ndcg@{n}", f"hr@{n}", f"ndcg@{n}_std", f"hr@{n}_std",
    ]
    lines = [",".join(header)]
    best = None
    for variant, overrides in cells:
        hp = dataclasses.replace(cfg.hp, **overrides)
        per_seed = {}
        for seed in cfg.eval_seeds:
            run_hp = dataclasses.replace(hp, seed=seed)
            trained = training.train(split.train, run_hp, threads=cfg.threads)
            instances = datamod.build_eval_instances(
                split, run_hp.max_len, seed,
                target_behavior_only=run_hp.eval_target_behavior_only,
                primary_behavior=run_hp.primary_behavior,
            )
            result = evaluation.evaluate(
                modelmod.CandidateScorer(trained.params),
                {seed: instances}, n_list=(n,),
            )
            per_seed[seed] = result.per_seed[seed]
        hrs = [per_seed[s][("hr", n)] for s in cfg.eval_seeds]
        ndcgs = [per_seed[s][("ndcg", n)] for s in cfg.eval_seeds]
        row = (
            [variant]
            + [f"{a:g}" for a in hp.alpha]
            + [f"{np.mean(ndcgs):.4f}", f"{np.mean(hrs):.4f}",
               f"{np.std(ndcgs):.4f}", f"{np.std(hrs):.4f}"]
        )
        lines.append(",".join(row))
        print(lines[-1])
        # First-encountered best row wins ties; row order is preserved.
        if best is None or np.mean(hrs) > best[0]:
            best = (np.mean(hrs), lines[-1])
    _write_lines(out / "ablation.csv", lines)
    print(f"best row by hr@{n}: {best[1]}")
    return 0


def cmd_bench(cfg):
    out = _start_run(cfg, need_data=False)
    rows = benchmod.run_bench(cfg)
    _write_lines(out / "bench.csv", benchmod.bench_csv_lines(rows))
    for line in benchmod.bench_table(rows):
        print(line)
    return 0


def cmd_inspect_data(cfg):
    if not cfg.data:
        raise ConfigError("--data is required")
    log = datamod.load_interactions(cfg.data)
    lengths = sorted(len(v) for v in log.users.values())
    per_behavior = {}
    for rows in log.users.values():
        for r in rows:
            per_behavior[r.behavior_id] = per_behavior.get(r.behavior_id, 0) + 1
    names = log.behavior_names or tuple(
        f"b{i}" for i in range(log.num_behaviors)
    )
    print(f"users: {log.num_users()}")
    print(f"items: {log.num_items}")
    print(f"interactions: {log.num_interactions()}")
    print(f"behaviors: {log.num_behaviors}")
    for b in sorted(per_behavior):
        label = names[b] if b < len(names) else f"b{b}"
        print(f"  {label} ({b}): {per_behavior[b]}")
    if lengths:
        mid = lengths[len(lengths) // 2]
        p90 = lengths[min(len(lengths) - 1, int(len(lengths) * 0.9))]
        print(f"sequence length: min={lengths[0]} median={mid} "
              f"p90={p90} max={lengths[-1]}")
    evaluable = sum(1 for v in log.users.values() if len(v) >= 2)
    print(f"evaluable users (>=2 interactions): {evaluable}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "inspect-data": cmd_inspect_data,
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        cfg = resolve_config(
            command=args.command,
            preset=args.preset or "",
            config_file=args.config,
            overrides=_overrides_from_args(args),
        )
        return _COMMANDS[args.command](cfg)
    except CasmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
