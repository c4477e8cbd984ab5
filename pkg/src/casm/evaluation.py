"""Leave-one-out ranking metrics: HR@N and NDCG@N over 100-candidate lists.

Ranks use pessimistic tie-breaking: every candidate scoring greater than or
equal to the positive (other than the positive itself) counts as ranked above
it, which makes rank 1 mean "unique maximum". Metrics are rank-based, so any
strictly increasing transformation of the scores leaves them unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def rank_of_positive(scores, positive_index):
    """1 + number of other candidates with score >= the positive's score."""
    scores = np.asarray(scores)
    return int(np.count_nonzero(scores >= scores[positive_index]))


def hr_at_n(rank, n):
    return 1 if rank <= n else 0


def ndcg_at_n(rank, n):
    """Single-relevant-item NDCG: 1/log2(1+rank) inside the cutoff, else 0."""
    return 1.0 / math.log2(1.0 + rank) if rank <= n else 0.0


@dataclass
class UserRecord:
    seed: int
    user_id: int
    rank: int
    primary_count: int


@dataclass
class EvalResult:
    n_list: tuple
    records: list  # list[UserRecord], all seeds concatenated
    per_seed: dict  # seed -> {(metric, N): value}
    aggregate: dict = field(default_factory=dict)  # (metric, N) -> (mean, std)

    def mean(self, metric, n):
        return self.aggregate[(metric, n)][0]

    def std(self, metric, n):
        return self.aggregate[(metric, n)][1]


def _seed_metrics(records, n_list):
    out = {}
    for n in n_list:
        hrs = [hr_at_n(r.rank, n) for r in records]
        ndcgs = [ndcg_at_n(r.rank, n) for r in records]
        out[("hr", n)] = float(np.mean(hrs))
        out[("ndcg", n)] = float(np.mean(ndcgs))
        # Aggregates are defined as the plain arithmetic mean of per-user
        # values; guard the identity explicitly.
        assert abs(out[("hr", n)] - sum(hrs) / len(hrs)) < 1e-12
        assert abs(out[("ndcg", n)] - sum(ndcgs) / len(ndcgs)) < 1e-12
    return out


def evaluate(scorer, instances_by_seed, n_list=(10,)):
    """Score candidate lists per seed and aggregate mean/std across seeds.

    ``scorer(instances) -> [U, C]`` must be read-only; candidate sets are
    expected to have been sampled with per-seed RNGs upstream.
    """
    records = []
    per_seed = {}
    for seed in sorted(instances_by_seed):
        instances = instances_by_seed[seed]
        scores = scorer(instances)
        seed_records = []
        for i, inst in enumerate(instances):
            rank = rank_of_positive(scores[i], inst.pos_index)
            seed_records.append(
                UserRecord(seed, inst.user_id, rank, inst.primary_count)
            )
        per_seed[seed] = _seed_metrics(seed_records, n_list)
        records.extend(seed_records)

    aggregate = {}
    for key in next(iter(per_seed.values())):
        vals = np.array([per_seed[s][key] for s in per_seed])
        aggregate[key] = (float(vals.mean()), float(vals.std()))
    return EvalResult(
        n_list=tuple(n_list), records=records, per_seed=per_seed,
        aggregate=aggregate,
    )


@dataclass
class BucketRow:
    label: str
    lo: int
    hi: int  # exclusive; -1 means unbounded
    count: int
    metrics: dict  # (metric, N) -> mean over records in the bucket


def evaluate_stratified(result, bucket_edges):
    """Group user records by primary-behavior interaction count.

    Buckets are [0, e1), [e1, e2), ..., [ek, inf). Empty buckets are omitted
    rather than reported as zero.
    """
    edges = sorted(bucket_edges)
    bounds = []
    lo = 0
    for e in edges:
        bounds.append((lo, e))
        lo = e
    bounds.append((lo, -1))

    rows = []
    for lo, hi in bounds:
        members = [
            r for r in result.records
            if r.primary_count >= lo and (hi < 0 or r.primary_count < hi)
        ]
        if not members:
            continue
        metrics = {}
        for n in result.n_list:
            metrics[("hr", n)] = float(np.mean([hr_at_n(r.rank, n) for r in members]))
            metrics[("ndcg", n)] = float(
                np.mean([ndcg_at_n(r.rank, n) for r in members])
            )
        label = f"[{lo},{hi})" if hi >= 0 else f"[{lo},inf)"
        rows.append(BucketRow(label, lo, hi, len(members), metrics))
    return rows


def result_csv_lines(result):
    """`metric,N,mean,std,seed_values` with seed values ';'-joined in seed order."""
    lines = ["metric,N,mean,std,seed_values"]
    seeds = sorted(result.per_seed)
    for metric in ("hr", "ndcg"):
        for n in result.n_list:
            mean, std = result.aggregate[(metric, n)]
            vals = ";".join(f"{result.per_seed[s][(metric, n)]:.6f}" for s in seeds)
            lines.append(f"{metric},{n},{mean:.6f},{std:.6f},{vals}")
    return lines


def per_user_csv_lines(result):
    """`seed,user_id,primary_count,rank` for external stratified analysis."""
    lines = ["seed,user_id,primary_count,rank"]
    for r in result.records:
        lines.append(f"{r.seed},{r.user_id},{r.primary_count},{r.rank}")
    return lines


def stratified_csv_lines(rows, n_list):
    header = ["bucket", "lo", "hi", "users"]
    for n in n_list:
        header += [f"hr@{n}", f"ndcg@{n}"]
    lines = [",".join(header)]
    for row in rows:
        cells = [row.label, str(row.lo), str(row.hi), str(row.count)]
        for n in n_list:
            cells.append(f"{row.metrics[('hr', n)]:.6f}")
            cells.append(f"{row.metrics[('ndcg', n)]:.6f}")
        lines.append(",".join(cells))
    return lines
