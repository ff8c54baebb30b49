"""Experiment configuration: one YAML file, schema version 1.

Relative paths are resolved against the directory holding the config file.
Environment overrides: ``MCICONV_WORK_DIR`` replaces ``paths.work_dir`` and
``MCICONV_THREADS`` sets the torch intra-op thread count.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .cohort import CohortConfig
from .embedding import HistLossConfig
from .nets import NetConfig
from .tabular import DEFAULT_GRIDS, TabularModelSpec
from .trainer import TrainConfig
from .volumes import PreprocessConfig

SCHEMA_VERSION = 1
DATA_SOURCES = ("clinical", "neuroimaging", "embedding", "clinical+embedding")
METHODS = ("logreg", "gbt", "voxcnn", "resnet3d")
VALID_ROWS = (
    ("clinical", "logreg"),
    ("clinical", "gbt"),
    ("neuroimaging", "voxcnn"),
    ("neuroimaging", "resnet3d"),
    ("embedding", "logreg"),
    ("embedding", "gbt"),
    ("clinical+embedding", "logreg"),
    ("clinical+embedding", "gbt"),
)
EMBEDDING_MODES = ("leakage-safe", "paper-faithful")


class ConfigError(ValueError):
    pass


def check_row(data: str, method: str) -> tuple[str, str]:
    if (data, method) not in VALID_ROWS:
        raise ConfigError(f"invalid experiment (data={data!r}, method={method!r})")
    return data, method


def _build(cls, values: Mapping[str, Any] | None, section: str):
    values = dict(values or {})
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {unknown}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[{section}] {err}") from err


@dataclass
class EmbeddingSettings:
    mode: str = "leakage-safe"
    holdout_fraction: float = 0.1
    hist: HistLossConfig = field(default_factory=HistLossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    net: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    path: Path
    seed: int
    visit_table: Path
    volume_manifest: Path
    work_dir: Path
    cohort: CohortConfig
    preprocess: PreprocessConfig
    nets: dict[str, dict]
    train: TrainConfig
    embedding: EmbeddingSettings
    clinical_columns: list[str] | None
    categorical: list[str] | None
    tabular: dict[str, TabularModelSpec]
    cv: dict[str, Any]
    experiments: list[tuple[str, str]]
    visualize: dict[str, Any]
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def root(self) -> Path:
        return self.path.parent

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    def net_config(self, arch: str, input_shape) -> NetConfig:
        values = dict(self.nets.get(arch, {}))
        values.update(arch=arch, input_shape=tuple(input_shape))
        return _build(NetConfig, values, f"nets.{arch}")

    def embedding_net_config(self, input_shape) -> NetConfig:
        values = dict(self.nets.get("resnet3d", {}))
        values.update(self.embedding.net)
        values.update(arch="resnet3d", input_shape=tuple(input_shape))
        return _build(NetConfig, values, "embedding.net")

    def train_config(self, seed: int) -> TrainConfig:
        return _with_seed(self.train, seed)

    def embedding_train_config(self, seed: int) -> TrainConfig:
        return _with_seed(self.embedding.train, seed)

    def tabular_spec(self, kind: str, seed: int) -> TabularModelSpec:
        s = self.tabular[kind]
        return TabularModelSpec(kind, {k: list(v) for k, v in s.grid.items()}, s.inner_folds, seed)


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    values = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    values["seed"] = seed
    return TrainConfig(**values)


def load_config(path: str | Path, seed: int | None = None, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw, path.resolve(), seed, check_paths)


def config_from_dict(raw: dict, path: Path, seed: int | None = None, check_paths: bool = True) -> ExperimentConfig:
    known = {
        "schema_version", "seed", "paths", "cohort", "preprocess", "nets", "train", "embedding",
        "tabular", "cv", "experiments", "visualize", "synth",
    }
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    seed = int(raw.get("seed", 0)) if seed is None else int(seed)

    paths = dict(raw.get("paths") or {})
    root = path.parent
    for key in ("visit_table", "volume_manifest"):
        if key not in paths:
            raise ConfigError(f"paths.{key} is required")

    def res(p):
        p = Path(p)
        return p if p.is_absolute() else root / p

    visit_table, manifest = res(paths["visit_table"]), res(paths["volume_manifest"])
    work_dir = Path(os.environ["MCICONV_WORK_DIR"]) if os.environ.get("MCICONV_WORK_DIR") else res(paths.get("work_dir", "work"))
    if check_paths:
        for p in (visit_table, manifest):
            if not p.exists():
                raise ConfigError(f"referenced path does not exist: {p}")

    pre = dict(raw.get("preprocess") or {})
    if pre.get("expected_output_shape") is not None:
        pre["expected_output_shape"] = tuple(pre["expected_output_shape"])

    train_raw = dict(raw.get("train") or {})
    train = _build(TrainConfig, train_raw, "train")

    emb_raw = dict(raw.get("embedding") or {})
    mode = emb_raw.pop("mode", "leakage-safe")
    if mode not in EMBEDDING_MODES:
        raise ConfigError(f"embedding.mode must be one of {EMBEDDING_MODES}, got {mode!r}")
    hist = _build(HistLossConfig, {"n_bins": emb_raw.pop("n_bins", 100)}, "embedding")
    holdout = float(emb_raw.pop("holdout_fraction", 0.1))
    net_over = dict(emb_raw.pop("net", None) or {})
    emb_train = _build(TrainConfig, {**train_raw, **emb_raw}, "embedding")
    embedding = EmbeddingSettings(mode, holdout, hist, emb_train, net_over)

    tab_raw = dict(raw.get("tabular") or {})
    clinical_columns = tab_raw.pop("clinical_columns", None)
    categorical = tab_raw.pop("categorical", None)
    inner = int(tab_raw.pop("inner_folds", 3))
    tabular = {}
    for kind in DEFAULT_GRIDS:
        sec = dict(tab_raw.pop(kind, None) or {})
        tabular[kind] = _build(TabularModelSpec, {"kind": kind, "inner_folds": inner, **sec}, f"tabular.{kind}")
    if tab_raw:
        raise ConfigError(f"unknown keys in [tabular]: {sorted(tab_raw)}")

    cv = {"k": 5, "val_fraction": 0.2, "repeats": 1, "threshold": 0.5}
    cv_raw = dict(raw.get("cv") or {})
    if set(cv_raw) - set(cv):
        raise ConfigError(f"unknown keys in [cv]: {sorted(set(cv_raw) - set(cv))}")
    cv.update(cv_raw)

    rows = raw.get("experiments")
    experiments = list(VALID_ROWS) if rows is None else [check_row(*r) for r in (tuple(x) for x in rows)]

    viz = {"perplexity": 30.0, "seed": None, "bandwidth": None}
    viz.update(raw.get("visualize") or {})
    nets = {k: dict(v or {}) for k, v in (raw.get("nets") or {}).items()}
    if set(nets) - {"voxcnn", "resnet3d"}:
        raise ConfigError(f"unknown keys in [nets]: {sorted(set(nets) - {'voxcnn', 'resnet3d'})}")

    return ExperimentConfig(
        path=path,
        seed=seed,
        visit_table=visit_table,
        volume_manifest=manifest,
        work_dir=work_dir,
        cohort=_build(CohortConfig, raw.get("cohort"), "cohort"),
        preprocess=_build(PreprocessConfig, pre, "preprocess"),
        nets=nets,
        train=train,
        embedding=embedding,
        clinical_columns=clinical_columns,
        categorical=categorical,
        tabular=tabular,
        cv=cv,
        experiments=experiments,
        visualize=viz,
        raw=raw,
    )


def desk_config(seed: int = 0) -> dict:
    """Config tree for a synthetic desk-scale workspace (reduced nets, short runs)."""
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "paths": {"visit_table": "visits.csv", "volume_manifest": "volumes.csv", "work_dir": "work"},
        "cohort": {"horizon_months": 60, "treat_reversion_as_stable": True},
        "preprocess": {"threshold": 0.0, "downsample": True, "normalize": True},
        "nets": {
            "voxcnn": {
                "blocks": 4, "convs_per_block": 2, "base_channels": 4, "max_channels": 16,
                "pool_schedule": [2], "fc_widths": [32, 16],
            },
            "resnet3d": {
                "n_res_blocks": 3, "channel_plan": [8, 8, 16], "stem_channels": [8, 8, 8],
                "hidden_width": 32,
            },
        },
        "train": {"epochs": 2, "batch_size": 16, "lr0": 1e-3},
        "embedding": {"mode": "leakage-safe", "epochs": 3, "batch_size": 24, "n_bins": 100, "lr0": 1e-2},
        "tabular": {"inner_folds": 3, "categorical": ["sex"]},
        "cv": {"k": 5, "val_fraction": 0.2, "repeats": 1},
        "visualize": {"perplexity": 30.0},
    }
