"""Subject-grouped cross-validation plans, classification metrics, aggregation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

METRICS = ("acc", "roc_auc", "av_prec", "sens", "spec")
METRIC_TITLES = {"acc": "ACC", "roc_auc": "ROC AUC", "av_prec": "AV PREC", "sens": "SENS", "spec": "SPEC"}
UNDEFINED = "undefined"


class FoldError(ValueError):
    pass


@dataclass(frozen=True)
class Fold:
    train: frozenset[str]
    val: frozenset[str]
    test: frozenset[str]

    def side(self, subject_id: str) -> str | None:
        for name in ("train", "val", "test"):
            if subject_id in getattr(self, name):
                return name
        return None


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]
    seed: int
    repeat: int = 0

    @property
    def k(self) -> int:
        return len(self.folds)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "repeat": self.repeat,
            "folds": [
                {"train": sorted(f.train), "val": sorted(f.val), "test": sorted(f.test)} for f in self.folds
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FoldPlan":
        folds = tuple(
            Fold(frozenset(f["train"]), frozenset(f["val"]), frozenset(f["test"])) for f in d["folds"]
        )
        return cls(folds, int(d["seed"]), int(d.get("repeat", 0)))


def group_kfold(
    subject_ids: Iterable[str], k: int = 5, val_fraction: float = 0.2, seed: int = 0
) -> FoldPlan:
    """Deal shuffled subjects into ``k`` test folds; carve validation out of the rest.

    Duplicate ids (several visits of one subject) collapse to one group.
    """
    subjects = sorted(set(map(str, subject_ids)))
    if k < 2:
        raise FoldError("k must be >= 2")
    if k > len(subjects):
        raise FoldError(f"k={k} exceeds the number of subjects ({len(subjects)})")
    if not 0 <= val_fraction < 1:
        raise FoldError("val_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    chunks = np.array_split(np.arange(len(order)), k)
    folds = []
    for chunk in chunks:
        test = [order[i] for i in chunk]
        held = set(test)
        rest = [s for s in order if s not in held]
        n_val = int(round(val_fraction * len(rest)))
        if val_fraction > 0 and n_val == 0 and len(rest) >= 2:
            n_val = 1
        n_val = min(n_val, len(rest) - 1)
        folds.append(Fold(frozenset(rest[n_val:]), frozenset(rest[:n_val]), frozenset(test)))
    return FoldPlan(tuple(folds), seed)


def repeated_group_kfold(subject_ids, k=5, val_fraction=0.2, seed=0, repeats=1) -> list[FoldPlan]:
    ids = list(subject_ids)
    plans = []
    for r in range(repeats):
        p = group_kfold(ids, k, val_fraction, seed + r)
        plans.append(FoldPlan(p.folds, p.seed, r))
    return plans


def check_plan(plan: FoldPlan, subjects: Iterable[str]) -> None:
    """Raise if any fold leaks a subject across sides or the test folds miss coverage."""
    universe = set(subjects)
    seen: list[str] = []
    for i, f in enumerate(plan.folds):
        if f.train & f.val or f.train & f.test or f.val & f.test:
            raise FoldError(f"fold {i}: subject on two sides")
        if (f.train | f.val | f.test) != universe:
            raise FoldError(f"fold {i}: sides do not cover the subject universe")
        seen.extend(f.test)
    if len(seen) != len(set(seen)) or set(seen) != universe:
        raise FoldError("test folds do not partition the subjects")


def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney estimate; ties between a positive and a negative count 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores, labels) -> float | None:
    """Sum over distinct thresholds of (recall step) x precision."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp_at, n_at = tp[ends], ends + 1
    precision = tp_at / n_at
    recall_step = np.diff(np.r_[0, tp_at]) / n_pos
    return float(np.sum(recall_step * precision))


def compute_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float | None]:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    if len(labels) == 0:
        raise ValueError("no samples")
    pred = (scores >= threshold).astype(int)
    tp = int(((pred == 1) & (labels == 1)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    tn = int(((pred == 0) & (labels == 0)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    return {
        "acc": (tp + tn) / len(labels),
        "roc_auc": roc_auc(scores, labels),
        "av_prec": average_precision(scores, labels),
        "sens": tp / (tp + fn) if tp + fn else None,
        "spec": tn / (tn + fp) if tn + fp else None,
    }


@dataclass
class MetricsReport:
    data: str
    method: str
    per_fold: list[dict[str, float | None]]
    mean: dict[str, float | None] = field(default_factory=dict)
    std: dict[str, float | None] = field(default_factory=dict)

    def formatted(self, metric: str) -> str:
        m, s = self.mean.get(metric), self.std.get(metric)
        if m is None:
            return UNDEFINED
        return f"{m:.2f} ± {s:.2f}"

    def to_dict(self) -> dict:
        return {
            "data": self.data,
            "method": self.method,
            "per_fold": self.per_fold,
            "mean": self.mean,
            "std": self.std,
            "formatted": {m: self.formatted(m) for m in METRICS},
        }


def aggregate(records: Sequence[Mapping[str, float | None]], data: str = "", method: str = "") -> MetricsReport:
    """Mean and population std per metric; undefined fold values are skipped."""
    if not records:
        raise ValueError("aggregate needs at least one fold")
    mean, std = {}, {}
    for m in METRICS:
        vals = sorted(r[m] for r in records if r.get(m) is not None)
        if vals:
            mean[m] = float(np.mean(vals))
            std[m] = float(np.std(vals))
        else:
            mean[m] = std[m] = None
    return MetricsReport(data, method, [dict(r) for r in records], mean, std)


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Plain-text results table, one row per data/method pair."""
    head = ["Data / Method"] + [METRIC_TITLES[m] for m in METRICS]
    rows = [[f"{r.data} / {r.method}"] + [r.formatted(m) for m in METRICS] for r in reports]
    widths = [max(len(x[i]) for x in [head] + rows) for i in range(len(head))]
    line = "+".join("-" * (w + 2) for w in widths)
    out = [line, " | ".join(h.ljust(w) for h, w in zip(head, widths)), line]
    out += [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    out.append(line)
    return "\n".join(out)


def _csv_value(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return UNDEFINED
    return f"{v:.10f}"


def write_results_csv(reports: Sequence[MetricsReport], path: str | Path) -> None:
    """One row per experiment x metric, values fixed to 10 decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["data,method,metric,mean,std,formatted,n_folds"]
    for r in reports:
        for m in METRICS:
            lines.append(
                f"{r.data},{r.method},{m},{_csv_value(r.mean[m])},{_csv_value(r.std[m])},"
                f"{r.formatted(m)},{len(r.per_fold)}"
            )
    path.write_text("\n".join(lines) + "\n")


def write_reports_json(reports: Sequence[MetricsReport], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=1))
