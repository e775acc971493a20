"""Backbone plus multiple normal and overclustering soft-max heads."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import kernels

CHECKPOINT_FORMAT = 1
PROB_FLOOR = 1e-10
PHASES = ("warmup", "finetune", "main")


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    k_gt: int
    k: int
    heads_per_type: int = 5
    input_channels: int = 3
    backbone: str = "tiny-conv"
    sobel: bool = False

    def __post_init__(self):
        if self.k_gt < 2:
            raise ValueError("need at least two ground-truth classes")
        if self.k <= self.k_gt:
            raise ValueError(f"overclustering needs k > k_gt, got k={self.k}, k_gt={self.k_gt}")
        if self.heads_per_type < 1:
            raise ValueError("heads_per_type must be >= 1")
        if self.backbone not in ("tiny-conv", "residual"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be positive")


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class TinyConv(nn.Module):
    out_features = 128

    def __init__(self, in_channels):
        super().__init__()
        widths = (32, 64, 128, 128)
        blocks, cin = [], in_channels
        for w in widths:
            blocks.append(_conv_block(cin, w))
            cin = w
        self.features = nn.Sequential(*blocks, nn.AdaptiveAvgPool2d(1), nn.Flatten())

    def forward(self, x):
        return self.features(x)


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout),
        )
        self.skip = nn.Identity() if stride == 1 and cin == cout else nn.Sequential(
            nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.body(x) + self.skip(x))


class ResidualNet(nn.Module):
    """ResNet-18 style stack for users bringing their own weights."""

    out_features = 512

    def __init__(self, in_channels):
        super().__init__()
        layers = [nn.Conv2d(in_channels, 64, 3, 1, 1, bias=False), nn.BatchNorm2d(64), nn.ReLU(inplace=True)]
        cin = 64
        for cout, stride in ((64, 1), (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2), (512, 1)):
            layers.append(_BasicBlock(cin, cout, stride))
            cin = cout
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.features = nn.Sequential(*layers)

    def forward(self, x):
        return self.features(x)


class FuzzyOverclusterNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        net = TinyConv if cfg.backbone == "tiny-conv" else ResidualNet
        self.backbone = net(cfg.input_channels)
        f = net.out_features
        self.normal_heads = nn.ModuleList(nn.Linear(f, cfg.k_gt) for _ in range(cfg.heads_per_type))
        self.overcluster_heads = nn.ModuleList(nn.Linear(f, cfg.k) for _ in range(cfg.heads_per_type))
        self.register_buffer("mean", torch.zeros(cfg.input_channels))
        self.register_buffer("std", torch.ones(cfg.input_channels))

    def set_normalization(self, mean, std):
        self.mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
        self.std.copy_(torch.clamp(torch.as_tensor(std, dtype=torch.float32), min=1e-6))

    def heads(self, head_type):
        return self.normal_heads if head_type == "normal" else self.overcluster_heads

    def forward(self, x, head_type=None):
        """Soft-max outputs per head.

        ``x`` is ``N x C x H x W``. Returns ``{"normal": [...], "overcluster": [...]}``
        restricted to ``head_type`` when given.
        """
        x = (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]
        feats = self.backbone(x)
        types = ("normal", "overcluster") if head_type is None else (head_type,)
        return {t: [torch.softmax(h(feats), dim=1).clamp_min(PROB_FLOOR) for h in self.heads(t)]
                for t in types}


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """``N x H x W x C`` float array to a ``N x C x H x W`` tensor in channels-last layout."""
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2)


def build_network(cfg: ModelConfig, seed: int = 0, checkpoint=None) -> FuzzyOverclusterNet:
    """Construct a model with seeded initialization, optionally loading backbone weights."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = FuzzyOverclusterNet(cfg).to(memory_format=torch.channels_last)
    finally:
        torch.random.set_rng_state(gen_state)
    if checkpoint is not None:
        other, _ = load_checkpoint(checkpoint)
        try:
            model.backbone.load_state_dict(other.backbone.state_dict())
        except RuntimeError as exc:
            raise CheckpointError(f"backbone in {checkpoint} does not match {cfg}: {exc}") from None
        model.mean.copy_(other.mean)
        model.std.copy_(other.std)
    return model


@torch.no_grad()
def forward_heads(model: FuzzyOverclusterNet, images: np.ndarray, batch_size: int = 512):
    """Inference over raw ``N x H x W x C`` images (sobel applied here if configured).

    Returns ``(normal, overcluster)`` arrays shaped ``heads x N x width``.
    """
    images = np.ascontiguousarray(images, dtype=np.float32)
    if model.cfg.sobel and images.ndim == 4:
        images = kernels.sobel_batch(images)
    if images.ndim != 4 or images.shape[3] != model.cfg.input_channels:
        raise ValueError(f"expected N x H x W x {model.cfg.input_channels} images, got {images.shape}")
    was_training = model.training
    model.eval()
    normal, over = [], []
    try:
        for start in range(0, images.shape[0], batch_size):
            out = model(to_tensor(images[start:start + batch_size]))
            normal.append(torch.stack(out["normal"]).numpy())
            over.append(torch.stack(out["overcluster"]).numpy())
    finally:
        model.train(was_training)
    h = model.cfg.heads_per_type
    if not normal:
        return np.zeros((h, 0, model.cfg.k_gt), np.float32), np.zeros((h, 0, model.cfg.k), np.float32)
    return np.concatenate(normal, axis=1), np.concatenate(over, axis=1)


def save_checkpoint(path, model: FuzzyOverclusterNet, phase: str = "main", **extra) -> str:
    """Write a self-describing checkpoint; returns its sha256."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "phase": phase,
        **extra,
    }
    torch.save(payload, path)
    return file_digest(path)


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of types for corrupt files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    cfg = ModelConfig(**payload["model_config"])
    model = FuzzyOverclusterNet(cfg).to(memory_format=torch.channels_last)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the architecture: {exc}") from None
    model.eval()
    return model, payload


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
