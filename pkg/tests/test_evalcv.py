from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from oracles import pair_count_auc

from mciconv.evalcv import (
    METRICS,
    FoldError,
    FoldPlan,
    aggregate,
    average_precision,
    check_plan,
    compute_metrics,
    format_table,
    group_kfold,
    repeated_group_kfold,
    roc_auc,
    write_results_csv,
)


class TestGroupKFold:
    def test_partition(self):
        subjects = [f"s{i}" for i in range(23)]
        plan = group_kfold(subjects + subjects[:5], k=5, seed=3)
        check_plan(plan, subjects)
        sizes = sorted(len(f.test) for f in plan.folds)
        assert sizes == [4, 4, 5, 5, 5]

    def test_validation_fraction(self):
        plan = group_kfold([f"s{i}" for i in range(50)], k=5, val_fraction=0.2)
        assert all(len(f.val) == 8 for f in plan.folds)
        plan = group_kfold([f"s{i}" for i in range(50)], k=5, val_fraction=0.0)
        assert all(len(f.val) == 0 for f in plan.folds)

    def test_seeded(self):
        ids = [f"s{i}" for i in range(30)]
        assert group_kfold(ids, seed=1) == group_kfold(list(reversed(ids)), seed=1)
        assert group_kfold(ids, seed=1) != group_kfold(ids, seed=2)

    def test_too_few_subjects(self):
        with pytest.raises(FoldError):
            group_kfold(["a", "b"], k=3)
        with pytest.raises(FoldError):
            group_kfold(["a", "b"], k=1)

    def test_check_plan_detects_leak(self):
        plan = group_kfold([f"s{i}" for i in range(10)], k=2)
        f = plan.folds[0]
        leaky = FoldPlan((type(f)(f.train | {next(iter(f.test))}, f.val, f.test), plan.folds[1]), 0)
        with pytest.raises(FoldError):
            check_plan(leaky, [f"s{i}" for i in range(10)])

    def test_serialization(self):
        for plan in repeated_group_kfold([f"s{i}" for i in range(12)], k=3, seed=5, repeats=2):
            assert FoldPlan.from_dict(plan.to_dict()) == plan

    @given(n=st.integers(2, 60), k=st.integers(2, 10), frac=st.floats(0, 0.9), seed=st.integers(0, 10**6))
    @settings(max_examples=200, deadline=None)
    def test_properties(self, n, k, frac, seed):
        subjects = [f"s{i}" for i in range(n)]
        if k > n:
            with pytest.raises(FoldError):
                group_kfold(subjects, k, frac, seed)
            return
        plan = group_kfold(subjects, k, frac, seed)
        check_plan(plan, subjects)
        assert all(len(f.train) >= 1 for f in plan.folds)


class TestMetrics:
    def test_fixed_example(self):
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_ap_fixed_example(self):
        # ranking 0.8(+) 0.4(-) 0.35(+) 0.1(-): precision 1 at recall .5, 2/3 at recall 1
        assert average_precision([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.5 + 0.5 * 2 / 3)

    def test_ties_count_half(self):
        assert roc_auc([0.5, 0.5], [0, 1]) == 0.5
        assert average_precision([0.5, 0.5, 0.5], [1, 0, 0]) == pytest.approx(1 / 3)

    def test_single_class_undefined(self):
        m = compute_metrics([0.2, 0.9], [1, 1])
        assert m["roc_auc"] is None and m["spec"] is None
        assert m["sens"] == 0.5 and m["acc"] == 0.5
        assert average_precision([0.2, 0.3], [0, 0]) is None

    def test_threshold_metrics(self):
        m = compute_metrics([0.9, 0.6, 0.4, 0.2, 0.7], [1, 1, 1, 0, 0])
        assert m["acc"] == pytest.approx(3 / 5)
        assert m["sens"] == pytest.approx(2 / 3)
        assert m["spec"] == pytest.approx(1 / 2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compute_metrics([0.1, 0.2], [1])

    @given(
        data=st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=60)
    )
    @settings(max_examples=300, deadline=None)
    def test_auc_oracles(self, data):
        scores = [s / 6 for s, _ in data]
        labels = [y for _, y in data]
        if len(set(labels)) < 2:
            assert roc_auc(scores, labels) is None
            return
        ours = roc_auc(scores, labels)
        assert abs(ours - pair_count_auc(scores, labels)) <= 1e-12
        assert abs(ours - roc_auc_score(labels, scores)) <= 1e-12

    @given(seed=st.integers(0, 10**6))
    @settings(max_examples=100, deadline=None)
    def test_rank_invariance(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.random(30)
        labels = rng.integers(0, 2, 30)
        labels[:2] = [0, 1]
        # strictly increasing transforms keep both ranking metrics
        for f in (np.exp, lambda x: 3 * x - 7):
            assert roc_auc(f(scores), labels) == pytest.approx(roc_auc(scores, labels), abs=1e-12)
            assert average_precision(f(scores), labels) == pytest.approx(average_precision(scores, labels), abs=1e-12)


class TestAggregation:
    def records(self):
        return [
            {"acc": 0.5, "roc_auc": 0.6, "av_prec": 0.7, "sens": 0.8, "spec": None},
            {"acc": 0.7, "roc_auc": 0.8, "av_prec": 0.9, "sens": 1.0, "spec": None},
        ]

    def test_population_std(self):
        r = aggregate(self.records(), "clinical", "logreg")
        assert r.mean["acc"] == pytest.approx(0.6)
        assert r.std["acc"] == pytest.approx(0.1)
        assert r.formatted("acc") == "0.60 ± 0.10"
        assert r.formatted("spec") == "undefined"

    @given(perm_seed=st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_fold_order_invariant(self, perm_seed):
        rng = np.random.default_rng(7)
        recs = [{m: float(rng.random()) for m in METRICS} for _ in range(7)]
        order = np.random.default_rng(perm_seed).permutation(7)
        a = aggregate(recs)
        b = aggregate([recs[i] for i in order])
        assert a.mean == b.mean and a.std == b.std

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_csv_and_table(self, tmp_path):
        r = aggregate(self.records(), "clinical", "logreg")
        write_results_csv([r], tmp_path / "r.csv")
        rows = list(csv.DictReader((tmp_path / "r.csv").open()))
        assert [row["metric"] for row in rows] == list(METRICS)
        assert rows[0]["mean"] == "0.6000000000"
        assert rows[-1]["mean"] == "undefined"
        table = format_table([r])
        assert "clinical / logreg" in table and "0.60 ± 0.10" in table
