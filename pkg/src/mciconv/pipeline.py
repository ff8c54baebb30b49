"""Pipeline stages over a workspace directory.

Each stage reads what earlier stages wrote under ``cfg.work_dir`` and writes
its own outputs there; re-running a stage with the same inputs rewrites the
same bytes.  Layout::

    preprocess/  manifest.csv bbox.json audit.ndjson
    cohort/      examples.json stats.json audit.ndjson folds.json
    embedding/   <fold>/model.pt model.json history.{csv,json} embeddings.csv
    cnn/         <arch>/<fold>/model.pt model.json history.{csv,json} scores.csv
    tabular/     <data>__<method>/<fold>/model.joblib model.json transform.json scores.csv
    results/     results.csv table.txt reports.json scores.csv
    figures/     clusters.png kde_*.png (+ backing CSVs) coords.csv
    report/      report.txt
"""
from __future__ import annotations

import hashlib
import json
import logging
import subprocess
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

import joblib
import numpy as np
import pandas as pd
import torch

from . import cohort as cohort_mod
from .audit import AuditLog
from .config import VALID_ROWS, ConfigError, ExperimentConfig, check_row
from .embedding import (
    EmbeddingNet,
    LabeledVolumes,
    build_embedding_net,
    extract_embeddings,
    train_embedding,
)
from .evalcv import (
    METRICS,
    FoldPlan,
    MetricsReport,
    aggregate,
    compute_metrics,
    format_table,
    repeated_group_kfold,
    write_reports_json,
    write_results_csv,
)
from .nets import NetConfig, build_net, count_parameters
from .tabular import (
    ClinicalTransform,
    FeatureMatrix,
    embedding_matrix,
    fit_tabular,
    fuse_features,
    predict_scores,
)
from .trainer import ArrayDataset, evaluate_scores, seed_everything, state_digest, train_classifier
from .viz import project_2d, render_figures
from .volumes import PreprocessConfig, load_volume, preprocess_corpus

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    pass


def derive_seed(base: int, *parts) -> int:
    key = ":".join([str(base), *map(str, parts)])
    return int(hashlib.sha256(key.encode()).hexdigest()[:8], 16)


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest() if Path(path).exists() else "missing"


@lru_cache(maxsize=1)
def git_hash() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=str))


def _stage_dir(cfg: ExperimentConfig, *parts: str) -> Path:
    d = cfg.work_dir.joinpath(*parts)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"{path} not found; run `{stage}` first")
    return path


# --- preprocess -------------------------------------------------------------


def run_preprocess(cfg: ExperimentConfig) -> pd.DataFrame:
    audit = AuditLog()
    manifest = pd.read_csv(cfg.volume_manifest, dtype={"subject_id": str})
    missing = {"subject_id", "month", "input_path", "output_path"} - set(manifest.columns)
    if missing:
        raise StageError(f"volume manifest lacks columns {sorted(missing)}")
    base = cfg.volume_manifest.parent
    absolute = manifest.copy()
    for col in ("input_path", "output_path"):
        absolute[col] = [str(p if Path(p).is_absolute() else base / p) for p in manifest[col]]
    done, box = preprocess_corpus(absolute, cfg.preprocess, audit)
    out = manifest.copy()
    out["status"] = done["status"].values
    d = _stage_dir(cfg, "preprocess")
    out.to_csv(d / "manifest.csv", index=False)
    _write_json(d / "bbox.json", {"bounds": box.to_list(), "shape": list(box.shape)})
    audit.write(d / "audit.ndjson")
    logger.info("preprocessed %d/%d volumes, crop box %s", (out["status"] == "ok").sum(), len(out), box.shape)
    return out


def processed_index(cfg: ExperimentConfig) -> pd.DataFrame:
    """(subject_id, month, path) of every successfully preprocessed volume."""
    path = _require(cfg.work_dir / "preprocess" / "manifest.csv", "preprocess")
    m = pd.read_csv(path, dtype={"subject_id": str})
    m = m[m["status"] == "ok"].copy()
    base = cfg.volume_manifest.parent
    m["path"] = [str(p if Path(p).is_absolute() else base / p) for p in m["output_path"]]
    m["month"] = m["month"].astype(int)
    return m[["subject_id", "month", "path"]].sort_values(["subject_id", "month"]).reset_index(drop=True)


def load_volumes(paths: Iterable[str]) -> np.ndarray:
    vols = [load_volume(p).data for p in paths]
    if not vols:
        return np.empty((0, 1, 1, 1), dtype=np.float32)
    shapes = {v.shape for v in vols}
    if len(shapes) != 1:
        raise StageError(f"preprocessed volumes differ in shape: {sorted(shapes)}")
    return np.stack(vols).astype(np.float32)


# --- cohort -----------------------------------------------------------------


def run_build_cohort(cfg: ExperimentConfig):
    table = cohort_mod.read_visit_table(cfg.visit_table)
    pre = cfg.work_dir / "preprocess" / "manifest.csv"
    if pre.exists():
        idx = processed_index(cfg)
        lookup = {(s, m): p for s, m, p in idx.itertuples(index=False)}
        table["volume_path"] = [
            lookup.get((str(s), int(m)), "") for s, m in zip(table["subject_id"], table["month"])
        ]
    else:
        logger.warning("no preprocess manifest; cohort uses raw volume paths")
    audit = AuditLog()
    examples, stats = cohort_mod.build_conversion_dataset(table, cfg.cohort, audit)
    d = _stage_dir(cfg, "cohort")
    cohort_mod.save_cohort(examples, stats, d)

    subjects = sorted({e.subject_id for e in examples})
    plans = repeated_group_kfold(
        subjects, k=int(cfg.cv["k"]), val_fraction=float(cfg.cv["val_fraction"]),
        seed=cfg.seed, repeats=int(cfg.cv["repeats"]),
    )
    _write_json(d / "folds.json", [p.to_dict() for p in plans])
    logger.info("cohort: %s subjects, %s samples", stats.subjects, stats.samples)
    return examples, stats


def load_plans(cfg: ExperimentConfig) -> list[FoldPlan]:
    path = _require(cfg.work_dir / "cohort" / "folds.json", "build-cohort")
    return [FoldPlan.from_dict(d) for d in json.loads(path.read_text())]


def iter_folds(plans: list[FoldPlan]) -> Iterator[tuple[str, object]]:
    for plan in plans:
        for i, fold in enumerate(plan.folds):
            yield f"r{plan.repeat}_f{i}", fold


def cohort_frame(cfg: ExperimentConfig) -> pd.DataFrame:
    path = _require(cfg.work_dir / "cohort" / "examples.json", "build-cohort")
    frame = cohort_mod.examples_frame(cohort_mod.load_examples(path))
    if len(frame):
        frame["subject_id"] = frame["subject_id"].astype(str)
        frame["month"] = frame["month"].astype(int)
    return frame.sort_values(["subject_id", "month"]).reset_index(drop=True)


def _mask(frame: pd.DataFrame, subjects) -> np.ndarray:
    return frame["subject_id"].isin(sorted(subjects)).to_numpy()


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(model: torch.nn.Module, out_dir: Path, kind: str, seed: int, extra: dict, cfg: ExperimentConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out_dir / "model.pt")
    sidecar = {
        "kind": kind,
        "net_config": model.cfg.to_dict(),
        "n_parameters": count_parameters(model),
        "weights_digest": state_digest(model),
        "seed": seed,
        "git_hash": git_hash(),
        "data_manifest_digest": file_digest(cfg.work_dir / "preprocess" / "manifest.csv"),
        **extra,
    }
    _write_json(out_dir / "model.json", sidecar)


def load_embedding_model(model_dir: Path) -> EmbeddingNet:
    side = json.loads(_require(model_dir / "model.json", "train-embedding").read_text())
    nc = dict(side["net_config"])
    nc["input_shape"] = tuple(nc["input_shape"])
    model = build_embedding_net(NetConfig(**nc))
    model.load_state_dict(torch.load(model_dir / "model.pt", weights_only=True))
    model.eval()
    return model


# --- embedding ----------------------------------------------------------------


def _embedding_corpus(cfg: ExperimentConfig) -> tuple[pd.DataFrame, np.ndarray]:
    idx = processed_index(cfg)
    visits = cohort_mod.read_visit_table(cfg.visit_table)[["subject_id", "month", "diagnosis"]]
    visits["subject_id"] = visits["subject_id"].astype(str)
    visits["month"] = visits["month"].astype(int)
    idx = idx.merge(visits, on=["subject_id", "month"], how="inner")
    return idx, load_volumes(idx["path"])


def embedding_runs(cfg: ExperimentConfig) -> list[tuple[str, set[str]]]:
    """(run name, excluded subjects) for each embedding model to train."""
    if cfg.embedding.mode == "paper-faithful":
        return [("all", set())]
    return [(fold_id, set(fold.test)) for fold_id, fold in iter_folds(load_plans(cfg))]


def run_train_embedding(cfg: ExperimentConfig) -> list[Path]:
    idx, vols = _embedding_corpus(cfg)
    corpus = LabeledVolumes(vols, idx["diagnosis"].to_numpy(), idx["subject_id"].to_numpy(),
                            list(zip(idx["subject_id"], idx["month"])))
    shape = vols.shape[1:]
    out = []
    for name, excluded in embedding_runs(cfg):
        seed = derive_seed(cfg.seed, "embedding", name)
        seed_everything(seed)
        model = build_embedding_net(cfg.embedding_net_config(shape))
        tcfg = cfg.embedding_train_config(seed)
        part = corpus.subset(~np.isin(corpus.subject_ids, sorted(excluded)))
        model, history = train_embedding(model, part, tcfg, cfg.embedding.hist, cfg.embedding.holdout_fraction)
        d = _stage_dir(cfg, "embedding", name)
        history.write(d / "history")
        save_checkpoint(model, d, "embedding", seed, {
            "train_config": tcfg.__dict__, "n_bins": cfg.embedding.hist.n_bins,
            "excluded_subjects": sorted(excluded), "best_epoch": history.best_epoch,
            "mode": cfg.embedding.mode,
        }, cfg)
        out.append(d)
    return out


def run_extract_embeddings(cfg: ExperimentConfig) -> list[Path]:
    idx = processed_index(cfg)
    vols = load_volumes(idx["path"])
    keys = list(zip(idx["subject_id"], idx["month"]))
    out = []
    for name, _ in embedding_runs(cfg):
        d = cfg.work_dir / "embedding" / name
        model = load_embedding_model(d)
        table = extract_embeddings(model, vols, keys)
        table.to_csv(d / "embeddings.csv", index=False, float_format="%.10g")
        out.append(d / "embeddings.csv")
    return out


def embedding_table(cfg: ExperimentConfig, fold_id: str) -> pd.DataFrame:
    name = "all" if cfg.embedding.mode == "paper-faithful" else fold_id
    path = _require(cfg.work_dir / "embedding" / name / "embeddings.csv", "extract-embeddings")
    return pd.read_csv(path, dtype={"subject_id": str})


# --- CNN classifiers ---------------------------------------------------------------


def _rows(cfg: ExperimentConfig, kind: str) -> list[tuple[str, str]]:
    cnn = {"voxcnn", "resnet3d"}
    return [r for r in cfg.experiments if (r[1] in cnn) == (kind == "cnn")]


def run_train_cnn(cfg: ExperimentConfig, archs: Iterable[str] | None = None) -> None:
    archs = list(archs) if archs is not None else [m for _, m in _rows(cfg, "cnn")]
    if not archs:
        return
    frame = cohort_frame(cfg)
    idx = processed_index(cfg)
    frame = frame.merge(idx, on=["subject_id", "month"], how="inner")
    vols = load_volumes(frame["path"])
    labels = frame["label"].to_numpy().astype(int)
    for arch in archs:
        check_row("neuroimaging", arch)
        for fold_id, fold in iter_folds(load_plans(cfg)):
            seed = derive_seed(cfg.seed, "cnn", arch, fold_id)
            seed_everything(seed)
            model = build_net(cfg.net_config(arch, vols.shape[1:]))
            tcfg = cfg.train_config(seed)
            tr, va, te = _mask(frame, fold.train), _mask(frame, fold.val), _mask(frame, fold.test)
            model, history = train_classifier(
                model, ArrayDataset(vols[tr], labels[tr]), ArrayDataset(vols[va], labels[va]), tcfg
            )
            scores, _ = evaluate_scores(model, ArrayDataset(vols[te], labels[te]), tcfg.batch_size_for(arch))
            d = _stage_dir(cfg, "cnn", arch, fold_id)
            history.write(d / "history")
            best = history.records[history.best_epoch]
            save_checkpoint(model, d, arch, seed, {
                "train_config": tcfg.__dict__, "best_epoch": history.best_epoch,
                "val_metrics": {k: best.get(f"val_{k}") for k in METRICS},
            }, cfg)
            _write_scores(d / "scores.csv", frame[te], scores, fold_id)


def _write_scores(path: Path, rows: pd.DataFrame, scores, fold_id: str) -> None:
    out = pd.DataFrame({
        "subject_id": rows["subject_id"].to_numpy(),
        "month": rows["month"].to_numpy(),
        "label": rows["label"].to_numpy().astype(int),
        "score": np.asarray(scores, dtype=float),
        "fold": fold_id,
    })
    out.to_csv(path, index=False, float_format="%.12g")


# --- tabular models ------------------------------------------------------------


def clinical_columns(cfg: ExperimentConfig, frame: pd.DataFrame) -> list[str]:
    if cfg.clinical_columns:
        missing = [c for c in cfg.clinical_columns if c not in frame.columns]
        if missing:
            raise ConfigError(f"clinical columns not in the visit table: {missing}")
        return list(cfg.clinical_columns)
    fixed = {"subject_id", "month", "label", "months_to_conversion", "volume_ref"}
    return [c for c in frame.columns if c not in fixed]


def fit_tabular_fold(
    cfg: ExperimentConfig,
    data: str,
    method: str,
    frame: pd.DataFrame,
    fold,
    emb: pd.DataFrame | None,
    seed: int,
    audit: AuditLog | None = None,
):
    """Fit one tabular row on one fold; returns (model, transform, test rows, test scores)."""
    check_row(data, method)
    keyed = frame.set_index(["subject_id", "month"])
    train_keys = keyed.index[keyed.index.get_level_values(0).isin(sorted(fold.train | fold.val))]
    transform = None
    if data in ("clinical", "clinical+embedding"):
        cols = clinical_columns(cfg, frame)
        transform = ClinicalTransform.fit(keyed.loc[train_keys], cols, cfg.categorical, True, audit)
        X = transform.transform(keyed, audit)
        if data == "clinical+embedding":
            X = fuse_features(X, emb, audit)
    else:
        X = embedding_matrix(emb)
        X = FeatureMatrix(X.data[X.data.index.isin(keyed.index)], X.provenance)
        if audit is not None and len(X.data) < len(keyed):
            audit.add("rows dropped", reason="no embedding", count=len(keyed) - len(X.data))
    labels = keyed["label"].astype(int)
    in_train = X.data.index.get_level_values(0).isin(sorted(fold.train | fold.val))
    in_test = X.data.index.get_level_values(0).isin(sorted(fold.test))
    Xtr = FeatureMatrix(X.data[in_train], X.provenance)
    Xte = FeatureMatrix(X.data[in_test], X.provenance)
    ytr = labels.loc[Xtr.data.index].to_numpy()
    groups = Xtr.data.index.get_level_values(0).to_numpy()
    model = fit_tabular(cfg.tabular_spec(method, seed), Xtr, ytr, groups, audit)
    scores = predict_scores(model, Xte) if len(Xte.data) else np.empty(0)
    test_rows = Xte.data.index.to_frame(index=False)
    test_rows["label"] = labels.loc[Xte.data.index].to_numpy()
    return model, transform, test_rows, scores


def run_train_tabular(cfg: ExperimentConfig, rows: Iterable[tuple[str, str]] | None = None) -> None:
    rows = list(rows) if rows is not None else _rows(cfg, "tabular")
    frame = cohort_frame(cfg)
    for data, method in rows:
        check_row(data, method)
        for fold_id, fold in iter_folds(load_plans(cfg)):
            audit = AuditLog()
            emb = embedding_table(cfg, fold_id) if "embedding" in data else None
            seed = derive_seed(cfg.seed, "tabular", data, method, fold_id) % 2**31
            model, transform, test_rows, scores = fit_tabular_fold(cfg, data, method, frame, fold, emb, seed, audit)
            d = _stage_dir(cfg, "tabular", f"{data}__{method}", fold_id)
            joblib.dump(model, d / "model.joblib")
            _write_json(d / "model.json", {**model.sidecar(), "seed": seed, "git_hash": git_hash(),
                                            "train_subjects": sorted(fold.train | fold.val)})
            if transform is not None:
                _write_json(d / "transform.json", transform.to_dict())
            audit.write(d / "audit.ndjson")
            _write_scores(d / "scores.csv", test_rows, scores, fold_id)


# --- evaluation ------------------------------------------------------------------


def _row_dir(cfg: ExperimentConfig, data: str, method: str) -> tuple[Path, str]:
    if method in ("voxcnn", "resnet3d"):
        return cfg.work_dir / "cnn" / method, "train-cnn"
    return cfg.work_dir / "tabular" / f"{data}__{method}", "train-tabular"


def run_evaluate(cfg: ExperimentConfig) -> list[MetricsReport]:
    plans = load_plans(cfg)
    threshold = float(cfg.cv.get("threshold", 0.5))
    reports, all_scores = [], []
    for data, method in cfg.experiments:
        base, stage = _row_dir(cfg, data, method)
        per_repeat: dict[int, list[dict]] = {}
        for plan in plans:
            for i, _ in enumerate(plan.folds):
                fold_id = f"r{plan.repeat}_f{i}"
                s = pd.read_csv(_require(base / fold_id / "scores.csv", stage), dtype={"subject_id": str})
                per_repeat.setdefault(plan.repeat, []).append(
                    compute_metrics(s["score"].to_numpy(), s["label"].to_numpy(), threshold)
                )
                s.insert(0, "method", method)
                s.insert(0, "data", data)
                all_scores.append(s)
        if len(per_repeat) == 1:
            records = per_repeat[0]
        else:
            # repeated CV: spread is taken over repeat-level means
            records = [aggregate(recs).mean for _, recs in sorted(per_repeat.items())]
        reports.append(aggregate(records, data, method))

    d = _stage_dir(cfg, "results")
    write_results_csv(reports, d / "results.csv")
    write_reports_json(reports, d / "reports.json")
    (d / "table.txt").write_text(format_table(reports) + "\n")
    if all_scores:
        pd.concat(all_scores).to_csv(d / "scores.csv", index=False, float_format="%.12g")
    return reports


def run_experiment(cfg: ExperimentConfig, rows: Iterable[tuple[str, str]] | None = None) -> list[MetricsReport]:
    """Fit and score every requested (data, method) row on every fold, then evaluate.

    Embeddings are trained and extracted first when a requested row needs them
    and none exist yet.
    """
    rows = [check_row(*r) for r in (rows if rows is not None else cfg.experiments)]
    if any("embedding" in d for d, _ in rows):
        first = embedding_runs(cfg)[0][0]
        if not (cfg.work_dir / "embedding" / first / "embeddings.csv").exists():
            run_train_embedding(cfg)
            run_extract_embeddings(cfg)
    run_train_cnn(cfg, [m for _, m in rows if m in ("voxcnn", "resnet3d")])
    run_train_tabular(cfg, [r for r in rows if r[1] in ("logreg", "gbt")])
    saved = cfg.experiments
    cfg.experiments = rows
    try:
        return run_evaluate(cfg)
    finally:
        cfg.experiments = saved


# --- figures and report -------------------------------------------------------------


def run_visualize(cfg: ExperimentConfig) -> dict[str, Path]:
    name = "all" if cfg.embedding.mode == "paper-faithful" else embedding_runs(cfg)[0][0]
    emb = embedding_table(cfg, name)
    visits = cohort_mod.read_visit_table(cfg.visit_table)[["subject_id", "month", "diagnosis"]]
    visits["subject_id"] = visits["subject_id"].astype(str)
    emb = emb.merge(visits, on=["subject_id", "month"], how="left")
    frame = cohort_frame(cfg)
    subject_label = dict(zip(frame["subject_id"], frame["label"])) if len(frame) else {}
    groups = []
    for sid, dx in zip(emb["subject_id"], emb["diagnosis"]):
        if dx == "MCI" and sid in subject_label:
            groups.append("cMCI" if subject_label[sid] == 1 else "sMCI")
        else:
            groups.append(dx)
    vec_cols = [c for c in emb.columns if c.startswith("e") and c[1:].isdigit()]
    seed = cfg.visualize.get("seed")
    seed = cfg.seed if seed is None else int(seed)
    coords = project_2d(emb[vec_cols].to_numpy(), seed=seed, perplexity=float(cfg.visualize["perplexity"]))
    d = _stage_dir(cfg, "figures")
    files = render_figures(coords, emb["diagnosis"].tolist(), groups, d, cfg.visualize.get("bandwidth"))
    pd.DataFrame({
        "subject_id": emb["subject_id"], "month": emb["month"], "x": coords[:, 0], "y": coords[:, 1],
        "diagnosis": emb["diagnosis"], "group": groups,
    }).to_csv(d / "coords.csv", index=False, float_format="%.10g")
    return files


def reference_expectations() -> dict:
    return json.loads(resources.files("mciconv").joinpath("data/reference_expectations.json").read_text())


def run_report(cfg: ExperimentConfig) -> str:
    ref = reference_expectations()
    lines = ["Conversion prediction: this run vs reference (full ADNI scale)", ""]
    stats_path = cfg.work_dir / "cohort" / "stats.json"
    if stats_path.exists():
        stats = json.loads(stats_path.read_text())
        rc = ref["cohort"]
        lines.append("Cohort          run subjects  ref subjects  run samples  ref samples")
        for cls in ("stable", "converged"):
            lines.append(
                f"{cls:<15} {stats['subjects'][cls]:>12}  {rc['subjects'][cls]:>12}  "
                f"{stats['samples'][cls]:>11}  {rc['samples'][cls]:>11}"
            )
        lines.append("")
    rep_path = cfg.work_dir / "results" / "reports.json"
    reports = json.loads(rep_path.read_text()) if rep_path.exists() else []
    by_row = {(r["data"], r["method"]): r for r in reports}
    head = f"{'Data / Method':<32}" + "".join(f"  {m:>25}" for m in METRICS)
    lines += [head, "-" * len(head)]
    for row in ref["table"]:
        key = (row["data"], row["method"])
        ours = by_row.get(key, {}).get("formatted", {})
        cells = "".join(f"  {ours.get(m, '-') + ' | ' + row['metrics'][m]:>25}" for m in METRICS)
        lines.append(f"{row['data'] + ' / ' + row['method']:<32}" + cells)
    lines += ["", "cells: this run | reference"]
    text = "\n".join(lines) + "\n"
    d = _stage_dir(cfg, "report")
    (d / "report.txt").write_text(text)
    return text


__all__ = [
    "VALID_ROWS",
    "PreprocessConfig",
    "run_preprocess",
    "run_build_cohort",
    "run_train_embedding",
    "run_extract_embeddings",
    "run_train_cnn",
    "run_train_tabular",
    "run_evaluate",
    "run_experiment",
    "run_visualize",
    "run_report",
]
