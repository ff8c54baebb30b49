"""Clinical feature preprocessing, embedding fusion and the two tabular models.

Both models (L2 logistic regression, gradient-boosted trees via xgboost) are
tuned by grid search scored with grouped inner cross-validation ROC AUC and
then refit on the whole training set with balanced sample weights.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd
from sklearn.linear_model import LogisticRegression
from xgboost import XGBClassifier

from .audit import AuditLog
from .evalcv import group_kfold, roc_auc
from .trainer import balanced_weights

logger = logging.getLogger(__name__)

KEY = ["subject_id", "month"]
DEFAULT_GRIDS: dict[str, dict[str, list]] = {
    "logreg": {"C": [0.01, 0.1, 1, 10, 100]},
    "gbt": {"max_depth": [2, 3, 4], "n_estimators": [100, 300], "learning_rate": [0.05, 0.1]},
}


class TabularError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    """Numeric features indexed by (subject_id, month) with per-column provenance."""

    data: pd.DataFrame
    provenance: dict[str, str]

    def __post_init__(self):
        if list(self.data.index.names) != KEY:
            raise TabularError(f"FeatureMatrix index must be {KEY}, got {self.data.index.names}")
        if self.data.index.has_duplicates:
            raise TabularError("duplicate (subject_id, month) keys")
        missing = [c for c in self.data.columns if c not in self.provenance]
        if missing:
            raise TabularError(f"columns without provenance: {missing}")

    @property
    def columns(self) -> list[str]:
        return list(self.data.columns)

    def manifest(self) -> list[dict[str, str]]:
        return [{"name": c, "provenance": self.provenance[c]} for c in self.columns]

    def select(self, provenance: str) -> "FeatureMatrix":
        cols = [c for c in self.columns if self.provenance[c] == provenance]
        return FeatureMatrix(self.data[cols], {c: provenance for c in cols})

    def rows(self, keys) -> "FeatureMatrix":
        return FeatureMatrix(self.data.loc[keys], self.provenance)


@dataclass
class ClinicalTransform:
    """Median imputation + missing indicators, one-hot encoding, standardisation.

    Every statistic is fitted on training rows only; the transform serialises to
    plain JSON and is reapplied unchanged to test rows.
    """

    numeric: list[str] = field(default_factory=list)
    categorical: dict[str, list[str]] = field(default_factory=dict)
    medians: dict[str, float] = field(default_factory=dict)
    indicators: list[str] = field(default_factory=list)
    means: dict[str, float] = field(default_factory=dict)
    stds: dict[str, float] = field(default_factory=dict)
    dropped: list[str] = field(default_factory=list)
    standardize: bool = True

    @classmethod
    def fit(
        cls,
        raw: pd.DataFrame,
        columns: Sequence[str],
        categorical: Sequence[str] | None = None,
        standardize: bool = True,
        audit: AuditLog | None = None,
    ) -> "ClinicalTransform":
        if categorical is None:
            categorical = [c for c in columns if not pd.api.types.is_numeric_dtype(raw[c])]
        t = cls(standardize=standardize)
        for c in columns:
            col = raw[c]
            if col.isna().all():
                t.dropped.append(c)
                if audit is not None:
                    audit.add("column dropped", column=c, reason="entirely missing in training rows")
                continue
            if c in categorical:
                t.categorical[c] = sorted(col.dropna().astype(str).unique().tolist())
                continue
            col = col.astype(float)
            t.numeric.append(c)
            t.medians[c] = float(col.median())
            if col.isna().any():
                t.indicators.append(c)
            if standardize:
                filled = col.fillna(t.medians[c])
                t.means[c] = float(filled.mean())
                std = float(filled.std(ddof=0))
                t.stds[c] = std if std > 0 else 1.0
        return t

    def transform(self, raw: pd.DataFrame, audit: AuditLog | None = None) -> FeatureMatrix:
        out: dict[str, pd.Series] = {}
        for c in self.numeric:
            col = raw[c].astype(float)
            filled = col.fillna(self.medians[c])
            if self.standardize:
                filled = (filled - self.means[c]) / self.stds[c]
            out[c] = filled
            if c in self.indicators:
                out[f"{c}__missing"] = col.isna().astype(float)
        for c, levels in self.categorical.items():
            col = raw[c].astype("string")
            unseen = sorted(set(col.dropna().unique()) - set(levels))
            if unseen and audit is not None:
                audit.add("unseen category", column=c, levels=unseen)
            for lv in levels:
                out[f"{c}={lv}"] = (col == lv).fillna(False).astype(float)
        data = pd.DataFrame(out, index=raw.index)
        if data.isna().any().any():
            raise TabularError("missing values survived preprocessing")
        return FeatureMatrix(data, {c: "clinical" for c in data.columns})

    def to_dict(self) -> dict[str, Any]:
        return {
            "numeric": self.numeric,
            "categorical": self.categorical,
            "medians": self.medians,
            "indicators": self.indicators,
            "means": self.means,
            "stds": self.stds,
            "dropped": self.dropped,
            "standardize": self.standardize,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ClinicalTransform":
        return cls(**d)


def _keyed(raw: pd.DataFrame) -> pd.DataFrame:
    if list(raw.index.names) == KEY:
        return raw
    raw = raw.copy()
    raw["subject_id"] = raw["subject_id"].astype(str)
    raw["month"] = raw["month"].astype(int)
    return raw.set_index(KEY)


def preprocess_clinical(
    raw: pd.DataFrame,
    fit_on,
    columns: Sequence[str],
    categorical: Sequence[str] | None = None,
    standardize: bool = True,
    audit: AuditLog | None = None,
) -> tuple[FeatureMatrix, ClinicalTransform]:
    """Fit the transform on the ``fit_on`` keys and apply it to every row."""
    raw = _keyed(raw)
    train = raw.loc[list(fit_on)]
    t = ClinicalTransform.fit(train, columns, categorical, standardize, audit)
    return t.transform(raw, audit), t


def fuse_features(clinical: FeatureMatrix, emb: pd.DataFrame, audit: AuditLog | None = None) -> FeatureMatrix:
    """Append embedding columns to clinical rows; rows with no embedding are dropped."""
    emb = _keyed(emb)
    if emb.index.has_duplicates:
        raise TabularError("duplicate (subject_id, month) keys in embedding table")
    clash = set(emb.columns) & set(clinical.columns)
    if clash:
        raise TabularError(f"embedding columns clash with clinical columns: {sorted(clash)}")
    keep = clinical.data.index.isin(emb.index)
    if not keep.all() and audit is not None:
        missing = [list(k) for k in clinical.data.index[~keep]]
        audit.add("rows dropped", reason="no embedding", count=len(missing), keys=missing)
    left = clinical.data[keep]
    fused = pd.concat([left, emb.loc[left.index].astype(float)], axis=1)
    prov = dict(clinical.provenance)
    prov.update({c: "embedding" for c in emb.columns})
    return FeatureMatrix(fused, prov)


def embedding_matrix(emb: pd.DataFrame) -> FeatureMatrix:
    emb = _keyed(emb).astype(float)
    return FeatureMatrix(emb, {c: "embedding" for c in emb.columns})


@dataclass
class TabularModelSpec:
    kind: str
    grid: dict[str, list] = field(default_factory=dict)
    inner_folds: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFAULT_GRIDS:
            raise TabularError(f"unknown tabular model kind {self.kind!r}")
        if not self.grid:
            self.grid = {k: list(v) for k, v in DEFAULT_GRIDS[self.kind].items()}
        if not all(self.grid.values()):
            raise TabularError("hyperparameter grid has an empty axis")

    def candidates(self) -> list[dict[str, Any]]:
        names = sorted(self.grid)
        return [dict(zip(names, vals)) for vals in itertools.product(*(self.grid[n] for n in names))]


def make_estimator(kind: str, params: Mapping[str, Any], seed: int = 0):
    if kind == "logreg":
        return LogisticRegression(penalty="l2", solver="lbfgs", max_iter=2000, **params)
    return XGBClassifier(
        tree_method="hist",
        n_jobs=1,
        random_state=seed,
        eval_metric="logloss",
        **params,
    )


def balanced_sample_weights(y) -> np.ndarray:
    y = np.asarray(y).astype(int)
    w = balanced_weights(int((y == 0).sum()), int((y == 1).sum()))
    return np.where(y == 1, float(w.w1), float(w.w0))


@dataclass
class TabularModel:
    kind: str
    params: dict[str, Any]
    columns: list[str]
    estimator: Any
    cv_scores: list[dict[str, Any]]

    def sidecar(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": self.params, "columns": self.columns, "cv_scores": self.cv_scores}


def _as_xy(X) -> tuple[pd.DataFrame, list[str]]:
    if isinstance(X, FeatureMatrix):
        return X.data, X.columns
    return X, list(X.columns)


def fit_tabular(
    spec: TabularModelSpec,
    X: FeatureMatrix | pd.DataFrame,
    y,
    groups,
    audit: AuditLog | None = None,
) -> TabularModel:
    data, cols = _as_xy(X)
    values = data.to_numpy(dtype=float)
    y = np.asarray(y).astype(int)
    groups = np.asarray(groups).astype(str)
    if len(set(y.tolist())) < 2:
        raise TabularError("fit_tabular needs both classes")

    n_groups = len(set(groups.tolist()))
    inner = min(spec.inner_folds, n_groups)
    plan = group_kfold(groups, k=inner, val_fraction=0.0, seed=spec.seed) if inner >= 2 else None

    results = []
    for params in spec.candidates():
        aucs = []
        for i, fold in enumerate(plan.folds if plan else []):
            te = np.isin(groups, sorted(fold.test))
            tr = ~te
            if len(set(y[tr].tolist())) < 2 or len(set(y[te].tolist())) < 2:
                if audit is not None:
                    audit.add("inner split skipped", fold=i, params=params, reason="single class")
                continue
            est = make_estimator(spec.kind, params, spec.seed)
            est.fit(values[tr], y[tr], sample_weight=balanced_sample_weights(y[tr]))
            aucs.append(roc_auc(est.predict_proba(values[te])[:, 1], y[te]))
        score = float(np.mean(aucs)) if aucs else -math.inf
        results.append({"params": params, "inner_auc": score if aucs else None, "n_splits": len(aucs)})

    best = max(range(len(results)), key=lambda i: (
        results[i]["inner_auc"] if results[i]["inner_auc"] is not None else -math.inf, -i))
    params = results[best]["params"]
    est = make_estimator(spec.kind, params, spec.seed)
    est.fit(values, y, sample_weight=balanced_sample_weights(y))
    return TabularModel(spec.kind, dict(params), cols, est, results)


def predict_scores(model: TabularModel, X: FeatureMatrix | pd.DataFrame) -> np.ndarray:
    data, cols = _as_xy(X)
    if cols != model.columns:
        missing = [c for c in model.columns if c not in cols]
        extra = [c for c in cols if c not in model.columns]
        if missing or extra:
            raise TabularError(f"column mismatch: missing {missing}, extra {extra}")
        data = data[model.columns]
    return model.estimator.predict_proba(data.to_numpy(dtype=float))[:, 1].astype(float)


def save_manifest(fm: FeatureMatrix, path) -> None:
    with open(path, "w") as fh:
        json.dump(fm.manifest(), fh, indent=1)
