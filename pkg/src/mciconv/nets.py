"""3D CNN classifiers: a VGG-style VoxCNN and a ResNet3D.

Both builders are driven by ``NetConfig`` and accept any input shape, so the
same code runs on full-size (75, 104, 87) volumes and on tiny desk volumes.
Modules return logits; ``forward`` turns them into class probabilities.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class NetConfigError(ValueError):
    pass


def _default_pool_schedule(n_blocks: int) -> list[int]:
    # 2x2x2 pool after every second block, never after the last one
    return [b for b in range(2, n_blocks, 2)]


@dataclass
class NetConfig:
    arch: str = "resnet3d"
    input_shape: tuple[int, int, int] = (75, 104, 87)
    n_classes: int = 2
    dropout_p: float = 0.7
    # voxcnn
    blocks: int = 10
    convs_per_block: int = 3
    base_channels: int = 16
    max_channels: int = 128
    pool_schedule: list[int] | None = None
    fc_widths: list[int] = field(default_factory=lambda: [512, 128])
    # resnet3d
    n_res_blocks: int = 6
    channel_plan: list[int] = field(default_factory=lambda: [64, 64, 64, 128, 128, 128])
    stem_channels: list[int] = field(default_factory=lambda: [32, 64, 64])
    final_pool: int = 5
    hidden_width: int = 128

    def __post_init__(self):
        self.input_shape = tuple(int(n) for n in self.input_shape)
        if self.pool_schedule is None:
            self.pool_schedule = _default_pool_schedule(self.blocks)
        self.pool_schedule = sorted(int(b) for b in self.pool_schedule)
        self.validate()

    def validate(self) -> None:
        if self.arch not in ("voxcnn", "resnet3d"):
            raise NetConfigError(f"unknown arch {self.arch!r}")
        if not 0 < self.dropout_p < 1:
            raise NetConfigError(f"dropout_p must be in (0, 1), got {self.dropout_p}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise NetConfigError(f"bad input_shape {self.input_shape}")
        if self.n_classes < 2:
            raise NetConfigError("n_classes must be >= 2")
        if self.arch == "voxcnn":
            if any(not 1 <= b <= self.blocks for b in self.pool_schedule):
                raise NetConfigError(f"pool_schedule {self.pool_schedule} refers to missing blocks")
            if len(set(self.pool_schedule)) != len(self.pool_schedule):
                raise NetConfigError("pool_schedule repeats a block")
            dims = voxcnn_output_shape(self)
            if min(dims) < 1:
                raise NetConfigError(
                    f"pool_schedule with {len(self.pool_schedule)} pools collapses "
                    f"input {self.input_shape} to {dims}"
                )
        else:
            if len(self.channel_plan) != self.n_res_blocks:
                raise NetConfigError(
                    f"channel_plan has {len(self.channel_plan)} entries, n_res_blocks={self.n_res_blocks}"
                )
            if not self.stem_channels:
                raise NetConfigError("stem_channels must be nonempty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


def voxcnn_output_shape(cfg: NetConfig) -> tuple[int, ...]:
    dims = list(cfg.input_shape)
    for _ in cfg.pool_schedule:
        dims = [d // 2 for d in dims]
    return tuple(dims)


def voxcnn_channels(cfg: NetConfig) -> list[int]:
    """Output channels per block: doubled after each pool, capped."""
    chans, c = [], cfg.base_channels
    for b in range(1, cfg.blocks + 1):
        chans.append(c)
        if b in cfg.pool_schedule:
            c = min(c * 2, cfg.max_channels)
    return chans


def stem_output_shape(input_shape: Sequence[int], n_convs: int = 3) -> tuple[int, ...]:
    dims = list(input_shape)
    for _ in range(n_convs):
        dims = [math.ceil(d / 2) for d in dims]
    return tuple(dims)


def conv_bn_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.BatchNorm3d(cout),
        nn.ReLU(inplace=True),
    )


class VoxCNN(nn.Module):
    arch = "voxcnn"

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        cin = 1
        for b, cout in enumerate(voxcnn_channels(cfg), start=1):
            for i in range(cfg.convs_per_block):
                layers.append(conv_bn_relu(cin if i == 0 else cout, cout))
            cin = cout
            if b in cfg.pool_schedule:
                layers.append(nn.MaxPool3d(2))
        self.features = nn.Sequential(*layers)

        flat = cin * math.prod(voxcnn_output_shape(cfg))
        head: list[nn.Module] = []
        width = flat
        for w in cfg.fc_widths:
            head += [nn.Linear(width, w), nn.BatchNorm1d(w), nn.ReLU(inplace=True), nn.Dropout(cfg.dropout_p)]
            width = w
        head.append(nn.Linear(width, cfg.n_classes))
        self.classifier = nn.Sequential(*head)

    def forward(self, x):
        return self.classifier(torch.flatten(self.features(x), 1))


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, kernel_size=3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(cout)
        self.conv2 = nn.Conv3d(cout, cout, kernel_size=3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(cout)
        if cin != cout:
            self.shortcut = nn.Sequential(nn.Conv3d(cin, cout, kernel_size=1, bias=False), nn.BatchNorm3d(cout))
        else:
            self.shortcut = nn.Identity()

    @property
    def has_projection(self) -> bool:
        return not isinstance(self.shortcut, nn.Identity)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x), inplace=True)


class ResNet3D(nn.Module):
    arch = "resnet3d"

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        stem, cin = [], 1
        for c in cfg.stem_channels:
            stem.append(conv_bn_relu(cin, c, stride=2))
            cin = c
        self.stem = nn.Sequential(*stem)

        blocks = []
        for c in cfg.channel_plan:
            blocks.append(ResidualBlock(cin, c))
            cin = c
        self.blocks = nn.Sequential(*blocks)

        spatial = stem_output_shape(cfg.input_shape, len(cfg.stem_channels))
        # pooling window shrinks on axes already smaller than the nominal kernel
        kernel = tuple(min(cfg.final_pool, d) for d in spatial)
        self.pool = nn.MaxPool3d(kernel)
        pooled = tuple(d // k for d, k in zip(spatial, kernel))
        self.feature_dim = cfg.hidden_width
        self.fc1 = nn.Sequential(
            nn.Linear(cin * math.prod(pooled), cfg.hidden_width),
            nn.BatchNorm1d(cfg.hidden_width),
            nn.ReLU(inplace=True),
            nn.Dropout(cfg.dropout_p),
        )
        self.fc2 = nn.Linear(cfg.hidden_width, cfg.n_classes)

    def features(self, x):
        x = self.pool(self.blocks(self.stem(x)))
        return self.fc1(torch.flatten(x, 1))

    def forward(self, x):
        return self.fc2(self.features(x))


def build_voxcnn(cfg: NetConfig) -> VoxCNN:
    if cfg.arch != "voxcnn":
        raise NetConfigError(f"build_voxcnn got arch {cfg.arch!r}")
    cfg.validate()
    return VoxCNN(cfg)


def build_resnet3d(cfg: NetConfig) -> ResNet3D:
    if cfg.arch != "resnet3d":
        raise NetConfigError(f"build_resnet3d got arch {cfg.arch!r}")
    cfg.validate()
    return ResNet3D(cfg)


def build_net(cfg: NetConfig) -> nn.Module:
    return build_voxcnn(cfg) if cfg.arch == "voxcnn" else build_resnet3d(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def check_input(model: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    expected = tuple(model.cfg.input_shape)
    if batch.ndim == 4:
        batch = batch.unsqueeze(1)
    if batch.ndim != 5 or tuple(batch.shape[2:]) != expected or batch.shape[1] != 1:
        raise ValueError(
            f"expected batch of shape (B, 1, {', '.join(map(str, expected))}), "
            f"got {tuple(batch.shape)}"
        )
    return batch


def forward(model: nn.Module, batch) -> torch.Tensor:
    """Class probabilities, shape (B, n_classes).  Mode (train/eval) is left as set."""
    batch = check_input(model, torch.as_tensor(batch, dtype=torch.float32))
    return F.softmax(model(batch), dim=1)


@torch.no_grad()
def predict_proba(model: nn.Module, batch, batch_size: int = 64) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        batch = torch.as_tensor(batch, dtype=torch.float32)
        parts = [forward(model, batch[i : i + batch_size]) for i in range(0, len(batch), batch_size)]
        return torch.cat(parts) if parts else torch.empty(0, model.cfg.n_classes)
    finally:
        model.train(was_training)
