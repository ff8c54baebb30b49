"""Supervised training loop for the volume classifiers.

Weighted binary cross-entropy with balanced class weights, SGD with Nesterov
momentum, a step learning-rate schedule, and keep-best checkpoint selection on
validation ROC AUC.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .evalcv import compute_metrics
from .nets import check_input

logger = logging.getLogger(__name__)

EPS = 1e-7
DEFAULT_BATCH_SIZE = {"resnet3d": 128, "voxcnn": 512}


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(f"{message}: {json.dumps(snapshot, default=str)}")
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    lr_drop_epochs: list[int] = field(default_factory=lambda: [30, 50])
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    epochs: int = 70
    batch_size: int | None = None
    seed: int = 0
    early_stop_metric: str = "roc_auc"
    weight_decay: float = 0.0

    def __post_init__(self):
        self.lr_drop_epochs = [int(e) for e in self.lr_drop_epochs]
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_drop_factor < 1:
            raise ValueError("lr_drop_factor must be in (0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError(f"lr_drop_epochs must be strictly increasing, got {drops}")
        # drop epochs past the run length are allowed so shortened runs keep the default schedule
        if self.early_stop_metric not in ("roc_auc", "loss"):
            raise ValueError(f"unknown early_stop_metric {self.early_stop_metric!r}")

    def batch_size_for(self, arch: str) -> int:
        return self.batch_size or DEFAULT_BATCH_SIZE.get(arch, 128)


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights, kept as exact rationals."""

    w0: Fraction
    w1: Fraction

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor([float(self.w0), float(self.w1)], dtype=dtype)


def balanced_weights(n0: int, n1: int) -> ClassWeights:
    """w_c = (n0 + n1) / (2 n_c), so that w0 * n0 == w1 * n1."""
    if n0 <= 0 or n1 <= 0:
        raise ValueError(f"both classes need samples, got n0={n0}, n1={n1}")
    total = n0 + n1
    return ClassWeights(Fraction(total, 2 * n0), Fraction(total, 2 * n1))


def weighted_bce(probabilities, labels, weights: ClassWeights, eps: float = EPS) -> torch.Tensor:
    """Mean of -w_y log p(y), where ``probabilities`` holds p(class 1) per sample."""
    p = torch.as_tensor(probabilities)
    if not p.is_floating_point():
        p = p.double()
    y = torch.as_tensor(labels, device=p.device)
    if p.shape != y.shape:
        raise ValueError(f"probabilities {tuple(p.shape)} and labels {tuple(y.shape)} differ in shape")
    p = p.clamp(eps, 1 - eps)
    y = y.to(p.dtype)
    w = float(weights.w1) * y + float(weights.w0) * (1 - y)
    return -(w * (y * torch.log(p) + (1 - y) * torch.log1p(-p))).mean()


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule evaluated in decimal so that 1e-3 * 0.1 is exactly 1e-4."""
    n_drops = sum(1 for e in cfg.lr_drop_epochs if e <= epoch)
    lr = Decimal(repr(cfg.lr0)) * Decimal(repr(cfg.lr_drop_factor)) ** n_drops
    return float(lr)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def state_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class ArrayDataset(Dataset):
    """In-memory (volume, label) pairs; volumes get a channel axis added."""

    def __init__(self, volumes, labels):
        self.volumes = torch.as_tensor(np.asarray(volumes), dtype=torch.float32)
        if self.volumes.ndim == 4:
            self.volumes = self.volumes.unsqueeze(1)
        self.labels = np.asarray(labels).astype(int)
        if len(self.volumes) != len(self.labels):
            raise ValueError("volumes and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return self.volumes[i], int(self.labels[i])


def _labels_of(ds: Dataset) -> np.ndarray:
    labels = getattr(ds, "labels", None)
    if labels is None:
        labels = [ds[i][1] for i in range(len(ds))]
    return np.asarray(labels).astype(int)


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    def to_dict(self) -> dict:
        return {"best_epoch": self.best_epoch, "records": self.records}

    def write(self, stem: str | Path) -> None:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=1))
        if self.records:
            keys = list(self.records[0])
            with stem.with_suffix(".csv").open("w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=keys)
                w.writeheader()
                w.writerows(self.records)


def _selection_key(rec: dict, metric: str) -> tuple[float, float]:
    # without a validation split, selection falls back to the training loss
    loss = rec.get("val_loss")
    if loss is None:
        loss = rec.get("train_loss")
    loss = math.inf if loss is None else loss
    if metric == "loss":
        return (-loss, 0.0)
    auc = rec.get("val_roc_auc")
    return (-math.inf if auc is None else auc, -loss)


@torch.no_grad()
def evaluate_scores(model: nn.Module, ds: Dataset, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode p(class 1) for every sample in ``ds`` plus the labels."""
    model.eval()
    scores, labels = [], []
    for x, y in DataLoader(ds, batch_size=batch_size, shuffle=False):
        scores.append(F.softmax(model(check_input(model, x)), dim=1)[:, 1].double().numpy())
        labels.append(np.asarray(y))
    if not scores:
        return np.empty(0), np.empty(0, dtype=int)
    return np.concatenate(scores), np.concatenate(labels).astype(int)


def train_classifier(
    model: nn.Module,
    train_ds: Dataset,
    val_ds: Dataset | None,
    cfg: TrainConfig,
) -> tuple[nn.Module, TrainHistory]:
    """Train for ``cfg.epochs`` epochs and return the best-validation weights."""
    y_train = _labels_of(train_ds)
    n0, n1 = int((y_train == 0).sum()), int((y_train == 1).sum())
    if n0 == 0 or n1 == 0:
        raise TrainingError(f"training split has a single class (n0={n0}, n1={n1})")
    weights = balanced_weights(n0, n1)
    batch_size = cfg.batch_size_for(getattr(model, "arch", ""))

    gen = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(train_ds, batch_size=batch_size, shuffle=True, generator=gen)
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.lr0, momentum=cfg.momentum, nesterov=True, weight_decay=cfg.weight_decay
    )
    history = TrainHistory()
    best_state, best_key = None, None

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        total, count = 0.0, 0
        for step, (x, y) in enumerate(loader):
            if len(y) < 2:
                # batch norm cannot train on a single sample
                continue
            probs = F.softmax(model(check_input(model, x)), dim=1)[:, 1]
            loss = weighted_bce(probs, y, weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    "non-finite training loss",
                    {"epoch": epoch, "step": step, "lr": lr, "loss": loss.item(), "n0": n0, "n1": n1},
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(y)
            count += len(y)

        rec = {"epoch": epoch, "lr": lr, "train_loss": total / count if count else None}
        if val_ds is not None and len(val_ds) > 0:
            scores, labels = evaluate_scores(model, val_ds, batch_size)
            rec["val_loss"] = float(weighted_bce(torch.from_numpy(scores), torch.from_numpy(labels), weights))
            rec.update({f"val_{k}": v for k, v in compute_metrics(scores, labels).items()})
        else:
            rec["val_loss"] = None
            rec["val_roc_auc"] = None
        history.records.append(rec)
        logger.info("epoch %d lr %.1e train %.4f val_auc %s", epoch, lr, rec["train_loss"] or math.nan,
                    rec.get("val_roc_auc"))

        key = _selection_key(rec, cfg.early_stop_metric)
        if best_key is None or key > best_key:
            best_key, history.best_epoch = key, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return model, history
