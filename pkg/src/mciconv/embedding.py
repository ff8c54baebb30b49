"""Deep embedding trained with the histogram loss.

The network is the ResNet3D trunk up to its hidden fully-connected layer,
followed by a 64-unit linear layer and L2 normalisation.  After training it is
frozen and used to featurise volumes.

Histogram loss on a batch of unit vectors: pairwise cosine similarities are
split into matching (same label) and non-matching pairs, each set is
soft-binned onto R evenly spaced nodes over [-1, 1] with triangular kernels,
and the loss is sum_r h_neg[r] * cdf_pos[r], the estimated probability that a
random non-matching pair is at least as similar as a random matching pair.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import Dataset

from .nets import NetConfig, NetConfigError, ResNet3D, check_input
from .trainer import TrainConfig, TrainHistory, lr_schedule

logger = logging.getLogger(__name__)

EMBED_DIM = 64
NORM_EPS = 1e-8


class PairError(ValueError):
    pass


@dataclass(frozen=True)
class HistLossConfig:
    n_bins: int = 100

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")

    @property
    def step(self) -> float:
        return 2.0 / (self.n_bins - 1)


def pair_masks(labels, subject_ids=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Upper-triangle masks of matching and non-matching pairs.

    A pair from one subject with different labels is neither: it is a
    subject's own progression, not an independent non-match.
    """
    labels = np.asarray(labels)
    same = torch.from_numpy(labels[:, None] == labels[None, :])
    upper = torch.ones_like(same).triu(diagonal=1)
    pos = same & upper
    neg = ~same & upper
    if subject_ids is not None:
        sids = np.asarray(subject_ids)
        same_subject = torch.from_numpy(sids[:, None] == sids[None, :])
        neg = neg & ~same_subject
    return pos, neg


def soft_histogram(sims: torch.Tensor, n_bins: int) -> torch.Tensor:
    step = 2.0 / (n_bins - 1)
    nodes = torch.linspace(-1.0, 1.0, n_bins, dtype=sims.dtype, device=sims.device)
    w = torch.clamp(1.0 - (sims[:, None] - nodes[None, :]).abs() / step, min=0.0)
    hist = w.sum(dim=0)
    return hist / hist.sum()


def histogram_loss(
    embeddings: torch.Tensor,
    labels,
    cfg: HistLossConfig | None = None,
    subject_ids=None,
) -> torch.Tensor:
    cfg = cfg or HistLossConfig()
    pos, neg = pair_masks(labels, subject_ids)
    if not pos.any():
        raise PairError("batch has no matching (positive) pairs")
    if not neg.any():
        raise PairError("batch has no non-matching (negative) pairs")
    sims = embeddings @ embeddings.T
    h_pos = soft_histogram(sims[pos], cfg.n_bins)
    h_neg = soft_histogram(sims[neg], cfg.n_bins)
    return (h_neg * torch.cumsum(h_pos, dim=0)).sum()


class EmbeddingNet(nn.Module):
    arch = "embedding"

    def __init__(self, cfg: NetConfig, dim: int = EMBED_DIM):
        super().__init__()
        self.cfg = cfg
        self.dim = dim
        self.backbone = ResNet3D(cfg)
        # the classification layer is not part of the embedding
        del self.backbone.fc2
        self.head = nn.Linear(self.backbone.feature_dim, dim)

    def forward(self, x):
        return F.normalize(self.head(self.backbone.features(x)), p=2, dim=1, eps=NORM_EPS)


def build_embedding_net(cfg: NetConfig, dim: int = EMBED_DIM) -> EmbeddingNet:
    if cfg.arch != "resnet3d":
        raise NetConfigError("the embedding network is built on a resnet3d config")
    cfg.validate()
    return EmbeddingNet(cfg, dim)


class BalancedBatchSampler:
    """Yields index batches holding every class equally, so both pair types exist.

    Each batch takes ``batch_size // n_classes`` (at least 2) samples per class.
    A batch without a valid non-matching pair (possible when the picked
    samples of different classes all come from one subject) is redrawn.
    """

    def __init__(self, labels, subject_ids, batch_size: int, seed: int = 0, max_tries: int = 100):
        self.labels = np.asarray(labels)
        self.subject_ids = np.asarray(subject_ids)
        self.classes = sorted(set(self.labels.tolist()))
        if len(self.classes) < 2:
            raise PairError("embedding training needs at least two diagnosis classes")
        self.per_class = max(2, batch_size // len(self.classes))
        self.n_batches = max(1, int(np.ceil(len(self.labels) / (self.per_class * len(self.classes)))))
        self.rng = np.random.default_rng(seed)
        self.max_tries = max_tries
        self.by_class = {c: np.flatnonzero(self.labels == c) for c in self.classes}

    def __len__(self):
        return self.n_batches

    def _draw(self) -> np.ndarray:
        parts = []
        for c in self.classes:
            idx = self.by_class[c]
            parts.append(self.rng.choice(idx, size=self.per_class, replace=len(idx) < self.per_class))
        return np.concatenate(parts)

    def __iter__(self):
        for _ in range(self.n_batches):
            for _ in range(self.max_tries):
                batch = self._draw()
                pos, neg = pair_masks(self.labels[batch], self.subject_ids[batch])
                if pos.any() and neg.any():
                    break
            else:
                raise PairError("could not draw a batch with both pair types")
            yield batch


class LabeledVolumes(Dataset):
    """Volumes with diagnosis labels and subject ids, held in memory."""

    def __init__(self, volumes, labels, subject_ids, keys=None):
        self.volumes = torch.as_tensor(np.asarray(volumes), dtype=torch.float32)
        if self.volumes.ndim == 4:
            self.volumes = self.volumes.unsqueeze(1)
        self.labels = np.asarray(labels)
        self.subject_ids = np.asarray(subject_ids).astype(str)
        self.keys = list(keys) if keys is not None else list(range(len(self.labels)))

    def __len__(self):
        return len(self.labels)

    def subset(self, mask) -> "LabeledVolumes":
        mask = np.asarray(mask, dtype=bool)
        keys = [k for k, m in zip(self.keys, mask) if m]
        return LabeledVolumes(self.volumes[torch.from_numpy(mask)], self.labels[mask], self.subject_ids[mask], keys)


def holdout_subjects(labels, subject_ids, fraction: float = 0.1, seed: int = 0) -> set[str]:
    """Pick ~``fraction`` of subjects for monitoring, round-robin over each
    subject's last label so the holdout spans several classes."""
    df = pd.DataFrame({"label": np.asarray(labels), "sid": np.asarray(subject_ids).astype(str)})
    last = df.groupby("sid", sort=True)["label"].last()
    n = max(2, int(round(fraction * len(last))))
    rng = np.random.default_rng(seed)
    groups = [list(rng.permutation(sorted(last.index[last == c]))) for c in sorted(last.unique())]
    chosen: list[str] = []
    while len(chosen) < n and any(groups):
        for g in groups:
            if g and len(chosen) < n:
                chosen.append(g.pop())
    if len(chosen) >= len(last):
        raise PairError("too few subjects to reserve a monitoring holdout")
    return set(chosen)


@torch.no_grad()
def embed(model: EmbeddingNet, volumes: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    model.eval()
    out = [model(check_input(model, volumes[i : i + batch_size])) for i in range(0, len(volumes), batch_size)]
    return torch.cat(out) if out else torch.empty(0, model.dim)


def _holdout_loss(model, ds: LabeledVolumes, hcfg: HistLossConfig, batch_size: int) -> float | None:
    if len(ds) == 0:
        return None
    try:
        return float(histogram_loss(embed(model, ds.volumes, batch_size), ds.labels, hcfg, ds.subject_ids))
    except PairError:
        return None


def train_embedding(
    model: EmbeddingNet,
    corpus: LabeledVolumes,
    cfg: TrainConfig,
    hcfg: HistLossConfig | None = None,
    holdout_fraction: float = 0.1,
) -> tuple[EmbeddingNet, TrainHistory]:
    """Minimise the histogram loss over class-balanced batches.

    A subject-level holdout is monitored after every epoch (and once before
    training, recorded as epoch -1); the weights with the lowest holdout loss
    are returned.  Without a usable holdout the training loss is monitored.
    """
    hcfg = hcfg or HistLossConfig()
    if len(set(corpus.labels.tolist())) < 2:
        raise PairError("embedding corpus has a single diagnosis class")
    held = holdout_subjects(corpus.labels, corpus.subject_ids, holdout_fraction, cfg.seed)
    in_holdout = np.isin(corpus.subject_ids, sorted(held))
    train, holdout = corpus.subset(~in_holdout), corpus.subset(in_holdout)
    if len(set(train.labels.tolist())) < 2:
        raise PairError("training part of the embedding corpus has a single class")
    batch_size = cfg.batch_size_for("resnet3d")

    sampler = BalancedBatchSampler(train.labels, train.subject_ids, batch_size, seed=cfg.seed)
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.lr0, momentum=cfg.momentum, nesterov=True, weight_decay=cfg.weight_decay
    )
    history = TrainHistory()
    initial = _holdout_loss(model, holdout, hcfg, batch_size)
    history.records.append({"epoch": -1, "lr": None, "train_loss": None, "holdout_loss": initial})
    best_state, best_loss = copy.deepcopy(model.state_dict()), initial
    history.best_epoch = -1

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        losses = []
        for idx in sampler:
            idx_t = torch.from_numpy(idx)
            z = model(train.volumes[idx_t])
            loss = histogram_loss(z, train.labels[idx], hcfg, train.subject_ids[idx])
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite histogram loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        hold = _holdout_loss(model, holdout, hcfg, batch_size)
        history.records.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "holdout_loss": hold})
        logger.info("embedding epoch %d lr %.1e train %.4f holdout %s", epoch, lr, train_loss, hold)
        monitored = hold if initial is not None else train_loss
        if best_loss is None or (monitored is not None and monitored < best_loss):
            best_loss, history.best_epoch = monitored, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return model, history


def extract_embeddings(model: EmbeddingNet, volumes, keys: Sequence[tuple[str, int]], batch_size: int = 64) -> pd.DataFrame:
    """Unit-norm vectors for each volume as a table keyed by (subject_id, month)."""
    vols = torch.as_tensor(np.asarray(volumes), dtype=torch.float32)
    if vols.ndim == 4:
        vols = vols.unsqueeze(1)
    if len(vols) != len(keys):
        raise ValueError(f"{len(vols)} volumes but {len(keys)} keys")
    z = embed(model, vols, batch_size).double().numpy()
    df = pd.DataFrame(z, columns=[f"e{i}" for i in range(z.shape[1])])
    df.insert(0, "month", [int(k[1]) for k in keys])
    df.insert(0, "subject_id", [str(k[0]) for k in keys])
    return df
