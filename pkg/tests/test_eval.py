"""Ranking metrics against sort-based oracles, aggregation, stratification."""

import math

import numpy as np
import pytest

from casm import evaluation as ev
from casm.data import EvalInstance


def sort_rank_oracle(scores, positive_index):
    """Independent oracle: descending sort with ties placed above the positive."""
    s = scores[positive_index]
    order = sorted(
        range(len(scores)),
        key=lambda i: (-scores[i], 0 if i != positive_index else 1),
    )
    return order.index(positive_index) + 1


def make_instance(user_id, rank_target, rng, primary_count=1):
    """An instance whose fabricated candidate scores are irrelevant here."""
    return EvalInstance(
        user_id=user_id, items=np.zeros(4, dtype=np.int64),
        behaviors=np.zeros(4, dtype=np.int64), mask=np.ones(4, dtype=np.uint8),
        pos_item=1, target_behavior=0,
        candidates=np.arange(1, 101, dtype=np.int64), pos_index=0,
        primary_count=primary_count,
    )


class ScoresByRank:
    """Scorer that places each instance's positive at a prescribed rank."""

    def __init__(self, ranks):
        self.ranks = ranks

    def __call__(self, instances):
        out = np.zeros((len(instances), 100))
        for i, inst in enumerate(instances):
            rank = self.ranks[inst.user_id]
            out[i] = np.linspace(0.0, 0.5, 100)
            out[i, inst.pos_index] = 0.6
            others = [j for j in range(100) if j != inst.pos_index]
            for k in range(rank - 1):  # rank-1 candidates strictly above
                out[i, others[k]] = 0.7 + 0.001 * k
        return out


class TestRankOfPositive:
    def test_unique_max_is_rank_one(self):
        scores = np.array([0.1, 0.9, 0.3])
        assert ev.rank_of_positive(scores, 1) == 1

    def test_tie_is_pessimistic(self):
        scores = np.array([0.9, 0.9, 0.3])
        assert ev.rank_of_positive(scores, 1) == 2

    def test_sort_oracle_equivalence(self, rng):
        for _ in range(1000):
            scores = rng.random(100)
            if rng.random() < 0.3:  # force exact ties sometimes
                scores = np.round(scores, 1)
            pos = int(rng.integers(0, 100))
            assert ev.rank_of_positive(scores, pos) == sort_rank_oracle(scores, pos)


class TestPointMetrics:
    def test_rank_one(self):
        assert ev.hr_at_n(1, 10) == 1
        assert ev.ndcg_at_n(1, 10) == pytest.approx(1.0)

    def test_rank_three(self):
        assert ev.ndcg_at_n(3, 10) == pytest.approx(0.5)  # 1/log2(4)

    def test_rank_past_cutoff(self):
        assert ev.hr_at_n(11, 10) == 0
        assert ev.ndcg_at_n(11, 10) == 0.0

    def test_monotone_in_n(self):
        for rank in (1, 3, 7, 15, 60):
            hrs = [ev.hr_at_n(rank, n) for n in range(1, 101)]
            ndcgs = [ev.ndcg_at_n(rank, n) for n in range(1, 101)]
            assert hrs == sorted(hrs)
            assert ndcgs == sorted(ndcgs)

    def test_ndcg_bounded_by_hr(self):
        for rank in range(1, 101):
            for n in (5, 10, 20):
                assert ev.ndcg_at_n(rank, n) <= ev.hr_at_n(rank, n) <= 1


class TestEvaluate:
    def test_three_user_fixture(self, rng):
        ranks = {1: 1, 2: 3, 3: 20}
        instances = [make_instance(u, ranks[u], rng) for u in (1, 2, 3)]
        result = ev.evaluate(ScoresByRank(ranks), {0: instances}, n_list=(10,))
        assert [r.rank for r in result.records] == [1, 3, 20]
        assert result.mean("hr", 10) == pytest.approx(2.0 / 3.0)
        assert result.mean("ndcg", 10) == pytest.approx((1.0 + 0.5 + 0.0) / 3.0)

    def test_oracle_model_is_perfect(self, rng):
        instances = [make_instance(u, 1, rng) for u in range(1, 21)]

        def oracle(batch):
            out = rng.random((len(batch), 100))
            for i, inst in enumerate(batch):
                out[i, inst.pos_index] = 1e9
            return out

        result = ev.evaluate(oracle, {0: instances}, n_list=(10,))
        assert result.mean("hr", 10) == 1.0
        assert result.mean("ndcg", 10) == 1.0

    def test_random_scores_hit_ten_percent(self):
        # i.i.d. continuous scores put the positive at a uniform rank, so
        # E[HR@10] = 0.1; check within 3 sigma of the binomial.
        rng = np.random.default_rng(77)
        users = 4000
        instances = [make_instance(u, 1, rng) for u in range(users)]

        def random_scorer(batch):
            return rng.random((len(batch), 100))

        result = ev.evaluate(random_scorer, {0: instances}, n_list=(10,))
        sigma = math.sqrt(0.1 * 0.9 / users)
        assert abs(result.mean("hr", 10) - 0.1) < 3 * sigma

    def test_multi_seed_mean_std(self, rng):
        ranks_by_seed = {0: {1: 1, 2: 1}, 1: {1: 1, 2: 20}}
        inst = {
            seed: [make_instance(u, r, rng) for u, r in ranks.items()]
            for seed, ranks in ranks_by_seed.items()
        }
        result = ev.evaluate(_SeedAwareScorer(ranks_by_seed), inst, n_list=(10,))
        assert result.per_seed[0][("hr", 10)] == 1.0
        assert result.per_seed[1][("hr", 10)] == 0.5
        assert result.mean("hr", 10) == pytest.approx(0.75)
        assert result.std("hr", 10) == pytest.approx(0.25)

    def test_monotone_transform_invariance(self, rng):
        ranks = {u: int(r) for u, r in
                 zip(range(40), rng.integers(1, 101, size=40))}
        instances = [make_instance(u, ranks[u], rng) for u in ranks]
        base_scorer = ScoresByRank(ranks)

        def transformed(batch):
            return np.exp(3.0 * base_scorer(batch) + 1.0)

        a = ev.evaluate(base_scorer, {0: instances}, n_list=(5, 10))
        b = ev.evaluate(transformed, {0: instances}, n_list=(5, 10))
        assert a.aggregate == b.aggregate

    def test_aggregate_equals_user_mean(self, rng):
        ranks = {u: int(r) for u, r in
                 zip(range(25), rng.integers(1, 101, size=25))}
        instances = [make_instance(u, ranks[u], rng) for u in ranks]
        result = ev.evaluate(ScoresByRank(ranks), {0: instances}, n_list=(10,))
        per_user = [ev.hr_at_n(r.rank, 10) for r in result.records]
        assert abs(result.mean("hr", 10) - np.mean(per_user)) < 1e-12


class _SeedAwareScorer:
    def __init__(self, ranks_by_seed):
        self.scorers = {s: ScoresByRank(r) for s, r in ranks_by_seed.items()}
        self.calls = 0

    def __call__(self, instances):
        scorer = self.scorers[sorted(self.scorers)[self.calls]]
        self.calls += 1
        return scorer(instances)


class TestStratified:
    def _result(self, rng, counts_ranks):
        ranks = {u: r for u, (_, r) in enumerate(counts_ranks)}
        instances = [
            make_instance(u, r, rng, primary_count=c)
            for u, (c, r) in enumerate(counts_ranks)
        ]
        return ev.evaluate(ScoresByRank(ranks), {0: instances}, n_list=(10,))

    def test_single_bucket_equals_global(self, rng):
        result = self._result(rng, [(3, 1), (3, 5), (3, 30)])
        rows = ev.evaluate_stratified(result, bucket_edges=(100,))
        assert len(rows) == 1
        assert rows[0].metrics[("hr", 10)] == pytest.approx(
            result.mean("hr", 10)
        )

    def test_partition_identity(self, rng):
        data = [(1, 1), (2, 15), (8, 2), (9, 40), (12, 3)]
        result = self._result(rng, data)
        rows = ev.evaluate_stratified(result, bucket_edges=(5,))
        total = sum(r.count for r in rows)
        weighted = sum(r.count * r.metrics[("hr", 10)] for r in rows) / total
        assert weighted == pytest.approx(result.mean("hr", 10))

    def test_group_by_oracle(self, rng):
        data = [(int(c), int(r)) for c, r in
                zip(rng.integers(0, 30, size=50), rng.integers(1, 101, size=50))]
        result = self._result(rng, data)
        edges = (5, 10, 20)
        rows = ev.evaluate_stratified(result, edges)
        # independent group-by-and-average
        def bucket_of(c):
            for i, e in enumerate(edges):
                if c < e:
                    return i
            return len(edges)

        groups = {}
        for rec in result.records:
            groups.setdefault(bucket_of(rec.primary_count), []).append(
                ev.hr_at_n(rec.rank, 10)
            )
        expected = {b: np.mean(v) for b, v in groups.items()}
        got = {}
        bounds = [0, *edges]
        for row in rows:
            got[bounds.index(row.lo)] = row.metrics[("hr", 10)]
        assert set(got) == set(expected)
        for b in expected:
            assert got[b] == pytest.approx(expected[b])

    def test_empty_bucket_omitted(self, rng):
        result = self._result(rng, [(0, 1), (25, 2)])
        rows = ev.evaluate_stratified(result, bucket_edges=(5, 10))
        labels = [r.label for r in rows]
        assert labels == ["[0,5)", "[10,inf)"]


class TestCsvEmission:
    def test_result_csv_layout(self, rng):
        ranks = {1: 1, 2: 3}
        instances = [make_instance(u, ranks[u], rng) for u in (1, 2)]
        result = ev.evaluate(ScoresByRank(ranks), {0: instances}, n_list=(10,))
        lines = ev.result_csv_lines(result)
        assert lines[0] == "metric,N,mean,std,seed_values"
        assert lines[1].startswith("hr,10,1.000000,0.000000,")
        per_user = ev.per_user_csv_lines(result)
        assert per_user[0] == "seed,user_id,primary_count,rank"
        assert per_user[1] == "0,1,1,1"
