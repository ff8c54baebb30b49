"""Acceptance suite: one test class per criterion, each at its stated tolerance.

The terminal summary (see conftest.py) prints one PASS/FAIL line per criterion.
"""
from __future__ import annotations

import hashlib
import json
import math
import random
import subprocess
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import torch
import torch.nn.functional as F

from mciconv.cohort import (
    CohortConfig,
    SubjectTimeline,
    TimelineRejected,
    VisitRecord,
    label_timeline,
    screen_subjects,
)
from mciconv.embedding import HistLossConfig, histogram_loss
from mciconv.evalcv import average_precision, group_kfold, roc_auc
from mciconv.nets import NetConfig, build_net, predict_proba, stem_output_shape
from mciconv.trainer import TrainConfig, balanced_weights, lr_schedule, weighted_bce
from mciconv.volumes import Volume, downsample2
from oracles import naive_histogram_loss, pair_count_auc, step_curve_ap

def _unit_batch(rng, n, dim, n_classes):
    x = rng.normal(size=(n, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    labels = rng.integers(0, n_classes, size=n)
    labels[:2] = [0, 1]
    labels[2:4] = [0, 1]
    return x, labels


# --- criteria 1-3: histogram loss ----------------------------------------------


@pytest.mark.criterion(1)
def test_histogram_loss_matches_enumeration():
    rng = np.random.default_rng(1)
    cfg = HistLossConfig(n_bins=16)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        x, labels = _unit_batch(rng, 32, 8, int(rng.integers(2, 5)))
        fast = histogram_loss(torch.from_numpy(x), labels, cfg).item()
        worst = max(worst, abs(fast - naive_histogram_loss(x, labels, 16)))
    elapsed = time.perf_counter() - start
    print(f"max abs diff {worst:.3e} in {elapsed:.1f}s")
    assert worst <= 1e-6
    assert elapsed < 30


def _far_from_nodes(x: np.ndarray, n_bins: int, margin: float) -> bool:
    z = x / np.linalg.norm(x, axis=1, keepdims=True)
    sims = (z @ z.T)[np.triu_indices(len(z), 1)]
    step = 2.0 / (n_bins - 1)
    offset = np.abs((sims + 1.0) / step - np.round((sims + 1.0) / step)) * step
    return bool(offset.min() > margin)


@pytest.mark.criterion(2)
def test_histogram_loss_gradient_matches_finite_differences():
    # the loss is piecewise smooth with kinks where a similarity crosses a bin
    # node; batches are drawn so that the +-eps probes stay inside one piece.
    # Batches sitting on a flat piece (zero gradient) say nothing about relative
    # error; they are checked for a vanishing numeric gradient and redrawn.
    rng = np.random.default_rng(2)
    cfg = HistLossConfig(n_bins=16)
    eps = 1e-4
    checked, worst = 0, 0.0
    while checked < 20:
        n = int(rng.integers(4, 9))
        dim = int(rng.integers(2, 5))
        x = rng.normal(size=(n, dim))
        labels = rng.integers(0, 2, size=n)
        labels[:4] = [0, 0, 1, 1]
        if not _far_from_nodes(x, cfg.n_bins, margin=1e-2):
            continue

        def loss_of(arr):
            t = torch.as_tensor(arr, dtype=torch.float64)
            return histogram_loss(F.normalize(t, dim=1), labels, cfg)

        xt = torch.tensor(x, dtype=torch.float64, requires_grad=True)
        loss_of(xt).backward()
        analytic = xt.grad.numpy()
        numeric = np.zeros_like(x)
        for idx in np.ndindex(*x.shape):
            up, down = x.copy(), x.copy()
            up[idx] += eps
            down[idx] -= eps
            numeric[idx] = (loss_of(up).item() - loss_of(down).item()) / (2 * eps)
        if np.linalg.norm(analytic) == 0.0:
            assert np.linalg.norm(numeric) < 1e-8
            continue
        worst = max(worst, np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric))
        checked += 1
    print(f"max relative gradient error {worst:.3e}")
    assert worst <= 1e-3


@pytest.mark.criterion(3)
class TestHistogramLossBoundaries:
    def test_fully_separated(self):
        e = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        emb = torch.stack([e, e, e, -e, -e, -e])
        loss = histogram_loss(emb, [0, 0, 0, 1, 1, 1], HistLossConfig())
        assert loss.item() <= 1e-9

    def test_identical_embeddings(self):
        e = F.normalize(torch.tensor([[0.3, -0.2, 0.9, 0.1]], dtype=torch.float64), dim=1)
        emb = e.repeat(6, 1)
        loss = histogram_loss(emb, [0, 1, 2, 0, 1, 2], HistLossConfig())
        assert abs(loss.item() - 1.0) <= 1e-9


# --- criteria 4-5: training objective --------------------------------------------


@pytest.mark.criterion(4)
class TestWeightedBCE:
    @pytest.mark.parametrize(
        "p, y, w0, w1, expected",
        [
            (0.8, 1, 1, 1, -math.log(0.8)),
            (0.8, 1, 1, 2.5, -2.5 * math.log(0.8)),
            (0.3, 0, 0.6, 4, -0.6 * math.log(0.7)),
            (0.5, 0, 1, 1, math.log(2.0)),
            (0.0, 1, 1, 1, -math.log(1e-7)),
            # the upper clamp 1 - 1e-7 rounds in float64, so 1 - p is not exactly 1e-7
            (1.0, 0, 2, 1, -2 * math.log(1 - (1 - 1e-7))),
        ],
    )
    def test_single_sample(self, p, y, w0, w1, expected):
        from mciconv.trainer import ClassWeights

        w = ClassWeights(Fraction(w0), Fraction(w1))
        got = weighted_bce(torch.tensor([p], dtype=torch.float64), torch.tensor([y]), w).item()
        assert abs(got - expected) <= 1e-9

    def test_balanced_weights_equalise_class_mass(self):
        rng = random.Random(4)
        for _ in range(50):
            n0, n1 = rng.randint(1, 10_000), rng.randint(1, 10_000)
            w = balanced_weights(n0, n1)
            assert w.w0 * n0 == w.w1 * n1

    def test_reference_counts(self):
        w = balanced_weights(1764, 1016)
        assert abs(float(w.w0) - 0.7880) <= 1e-4
        assert abs(float(w.w1) - 1.3681) <= 1e-4


@pytest.mark.criterion(5)
def test_lr_schedule_exact():
    cfg = TrainConfig()
    got = [lr_schedule(e, cfg) for e in (0, 29, 30, 49, 50, 69)]
    assert got == [1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5]


# --- criterion 6: shapes ------------------------------------------------------------


@pytest.mark.criterion(6)
class TestShapePipeline:
    def test_downsample(self):
        v = Volume.from_array(np.random.default_rng(6).random((150, 208, 173), dtype=np.float32))
        assert downsample2(v).data.shape == (75, 104, 87)

    def test_stem(self):
        assert stem_output_shape((75, 104, 87)) == (10, 13, 11)

    @pytest.mark.parametrize("arch", ["voxcnn", "resnet3d"])
    def test_nets_emit_probabilities(self, arch):
        torch.manual_seed(0)
        model = build_net(NetConfig(arch=arch, input_shape=(75, 104, 87)))
        x = torch.randn(2, 1, 75, 104, 87)
        p = predict_proba(model, x)
        assert tuple(p.shape) == (2, 2)
        np.testing.assert_allclose(p.sum(dim=1).numpy(), 1.0, atol=1e-5)


# --- criterion 7: cohort ------------------------------------------------------------


def _timeline(sid, dx, months):
    return SubjectTimeline.from_visits(VisitRecord(sid, m, d) for d, m in zip(dx, months))


# (subject, diagnoses, months, expected: "excluded:<reason>" | "rejected" | [(month, label, mtc)])
COHORT_FIXTURE = [
    ("c_inside", ["MCI", "MCI", "MCI", "AD", "AD"], [0, 6, 12, 18, 24],
     [(0, 1, 18), (6, 1, 12), (12, 1, 6)]),
    ("c_outside", ["MCI", "MCI", "MCI", "MCI", "AD"], [0, 12, 24, 48, 84],
     [(24, 1, 60), (48, 1, 36)]),
    ("c_edge", ["MCI", "MCI", "AD"], [0, 60, 61], [(60, 1, 1)]),
    ("s_long", ["MCI"] * 9, [0, 12, 24, 36, 48, 60, 72, 84, 96],
     [(0, 0, None), (12, 0, None), (24, 0, None), (36, 0, None)]),
    ("s_short", ["MCI", "MCI"], [0, 6], []),
    ("s_exact", ["MCI", "MCI", "MCI"], [0, 30, 60], [(0, 0, None)]),
    ("s_revert", ["MCI", "NC", "MCI", "NC"], [0, 12, 24, 72], [(0, 0, None)]),
    ("s_revert_mid", ["MCI", "MCI", "NC", "NC"], [0, 6, 12, 66], [(0, 0, None), (6, 0, None)]),
    ("x_nc", ["NC", "MCI", "AD"], [0, 12, 24], "excluded:screening NC"),
    ("x_ad", ["AD", "AD"], [0, 6], "excluded:screening AD"),
    ("x_noscreen", ["MCI", "AD"], [6, 12], "excluded:missing screening visit"),
    ("r_reversal", ["MCI", "AD", "MCI"], [0, 12, 24], "rejected"),
]


@pytest.mark.criterion(7)
def test_cohort_fixture_labels():
    cfg = CohortConfig(horizon_months=60)
    timelines = [_timeline(sid, dx, months) for sid, dx, months, _ in COHORT_FIXTURE]
    kept, excluded = screen_subjects(timelines)
    reasons = {e["subject_id"]: e["reason"] for e in excluded}
    kept_ids = {t.subject_id for t in kept}
    matches = 0
    for sid, _, _, expected in COHORT_FIXTURE:
        if isinstance(expected, str) and expected.startswith("excluded:"):
            ok = reasons.get(sid) == expected.split(":", 1)[1] and sid not in kept_ids
        elif expected == "rejected":
            tl = next(t for t in kept if t.subject_id == sid)
            with pytest.raises(TimelineRejected, match="diagnosis reversal after AD"):
                label_timeline(tl, cfg)
            ok = True
        else:
            tl = next(t for t in kept if t.subject_id == sid)
            got = [(e.month, int(e.label), e.months_to_conversion) for e in label_timeline(tl, cfg)]
            ok = got == expected
        matches += ok
        assert ok, sid
    assert matches == len(COHORT_FIXTURE) == 12


# --- criterion 8: grouped CV --------------------------------------------------------


@pytest.mark.criterion(8)
def test_group_kfold_hygiene():
    rng = np.random.default_rng(8)
    for trial in range(200):
        n_subjects = int(rng.integers(5, 120))
        k = int(rng.integers(2, min(10, n_subjects) + 1))
        subjects = [f"S{i:03d}" for i in range(n_subjects)]
        visits = rng.integers(1, 6, size=n_subjects)
        samples = pd.DataFrame({"subject_id": np.repeat(subjects, visits)})
        plan = group_kfold(samples["subject_id"], k=k, val_fraction=float(rng.uniform(0, 0.5)), seed=trial)

        assert len(plan.folds) == k
        test_union: list[str] = []
        for f in plan.folds:
            assert not (f.train & f.val) and not (f.train & f.test) and not (f.val & f.test)
            assert f.train | f.val | f.test == set(subjects)
            test_union.extend(f.test)
            sides = samples["subject_id"].map(f.side)
            assert sides.notna().all()
            assert samples.assign(side=sides).groupby("subject_id")["side"].nunique().max() == 1
        assert sorted(test_union) == sorted(subjects)


# --- criterion 9: metrics -----------------------------------------------------------


@pytest.mark.criterion(9)
class TestMetricOracles:
    def test_auc_and_ap_random_sets(self):
        rng = np.random.default_rng(9)
        worst_auc = worst_ap = 0.0
        for _ in range(500):
            n = int(rng.integers(2, 201))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            # coarse rounding forces ties
            scores = np.round(rng.random(n), int(rng.integers(1, 4)))
            worst_auc = max(worst_auc, abs(roc_auc(scores, labels) - pair_count_auc(scores, labels)))
            worst_ap = max(worst_ap, abs(average_precision(scores, labels) - step_curve_ap(list(scores), list(labels))))
        assert worst_auc <= 1e-9
        assert worst_ap <= 1e-9

    def test_fixed_example(self):
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75, abs=1e-12)


# --- criteria 10-11: CLI end to end ---------------------------------------------------

STAGES = [
    "preprocess", "build-cohort", "train-embedding", "extract-embeddings",
    "train-cnn", "train-tabular", "evaluate", "visualize",
]


def _cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "mciconv.cli", *args], capture_output=True, text=True, timeout=900
    )


def _smoke_run(root: Path, seed: int = 0) -> dict:
    ws = root / "ws"
    start = time.perf_counter()
    steps = [("synth", "--out", str(ws), "--seed", str(seed), "--n-subjects", "40", "--shape", "16")]
    steps += [(s, "--config", str(ws / "config.yaml")) for s in STAGES]
    for step in steps:
        res = _cli(*step)
        if res.returncode != 0:
            return {"failed": step[0], "stderr": res.stderr[-2000:]}
    return {"ws": ws, "elapsed": time.perf_counter() - start}


@pytest.fixture(scope="module")
def smoke_runs(tmp_path_factory):
    first = _smoke_run(tmp_path_factory.mktemp("run1"))
    second = _smoke_run(tmp_path_factory.mktemp("run2"))
    return first, second


@pytest.mark.criterion(10)
class TestEndToEnd:
    def test_completes_in_time(self, smoke_runs):
        run = smoke_runs[0]
        assert "failed" not in run, run
        print(f"smoke run took {run['elapsed']:.0f}s")
        assert run["elapsed"] < 15 * 60

    def test_epoch_counts(self, smoke_runs):
        work = smoke_runs[0]["ws"] / "work"
        for hist in (work / "embedding").glob("*/history.json"):
            epochs = [r["epoch"] for r in json.loads(hist.read_text())["records"] if r["epoch"] >= 0]
            assert epochs == [0, 1, 2]
        for hist in (work / "cnn").glob("*/*/history.json"):
            assert [r["epoch"] for r in json.loads(hist.read_text())["records"]] == [0, 1]

    def test_all_rows_reported(self, smoke_runs):
        reports = json.loads((smoke_runs[0]["ws"] / "work" / "results" / "reports.json").read_text())
        rows = {(r["data"], r["method"]) for r in reports}
        assert len(rows) == 8

    def test_tabular_auc(self, smoke_runs):
        res = pd.read_csv(smoke_runs[0]["ws"] / "work" / "results" / "results.csv")
        auc = res[(res["metric"] == "roc_auc") & res["method"].isin(["logreg", "gbt"])]
        assert len(auc) == 6
        print(auc[["data", "method", "mean"]].to_string(index=False))
        assert (auc["mean"].astype(float) >= 0.9).all()

    def test_embeddings_unit_norm(self, smoke_runs):
        files = sorted((smoke_runs[0]["ws"] / "work" / "embedding").glob("*/embeddings.csv"))
        assert files
        for f in files:
            emb = pd.read_csv(f)
            z = emb[[c for c in emb.columns if c.startswith("e")]].to_numpy()
            assert z.shape[1] == 64
            np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-5)

    def test_four_figures(self, smoke_runs):
        figs = sorted(p.name for p in (smoke_runs[0]["ws"] / "work" / "figures").glob("*.png"))
        assert len(figs) == 4, figs


@pytest.mark.criterion(11)
def test_repeat_run_same_digest(smoke_runs):
    first, second = smoke_runs
    assert "failed" not in first and "failed" not in second
    digests = [
        hashlib.sha256((r["ws"] / "work" / "results" / "results.csv").read_bytes()).hexdigest() for r in smoke_runs
    ]
    assert digests[0] == digests[1]
