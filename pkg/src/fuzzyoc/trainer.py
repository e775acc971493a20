"""Three-phase training: unsupervised warm-up, head fine-tuning, main training.

Each batch trains one head type. Normal heads get cross-entropy on labeled
items, overclustering heads the inverse cross-entropy; both add the negated
mutual information of the ``(x1, x2)`` pairs. Losses are averaged over the
head copies of the trained type.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch

from . import kernels
from .data import ConfigError, DatasetSplit, hard_labels
from .evaluator import accuracy, cluster_mapping, macro_f1
from .losses import (LossWeights, torch_ce_inverse_loss, torch_cross_entropy,
                     torch_mutual_information)
from .network import (FuzzyOverclusterNet, ModelConfig, build_network, forward_heads,
                      save_checkpoint, to_tensor)
from .sampler import AugmentationPolicy, BatchSchedule, RatioConfig

logger = logging.getLogger(__name__)

MODES = ("foc", "foc-light", "warmup-only")
PHASE_IDS = {"warmup": 1, "finetune": 2, "main": 3}
METRIC_FIELDS = ("phase", "epoch", "head_type", "loss_s", "loss_u", "val_f1", "val_acc")
STATE_FORMAT = 1


class DivergenceError(RuntimeError):
    """Raised when a loss term or gradient becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "foc"
    lambda_s: float = 1.0
    lambda_u: float = 1.0
    r: float = 0.5
    batch_size: int = 32
    repetitions: int = 3
    heads_per_type: int = 5
    k: Optional[int] = None
    backbone: str = "tiny-conv"
    input_channels: Optional[int] = None
    epochs_warmup: int = 50
    epochs_finetune: int = 20
    epochs_main: int = 100
    lr_warmup: float = 1e-4
    lr_finetune: float = 1e-3
    lr_main: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0
    alternate: str = "batch"
    mi_on_labeled: bool = True
    inverse_on_unlabeled: bool = True
    class_balanced_inverse: bool = False
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: unknown value {self.mode!r}")
        try:
            LossWeights(self.lambda_s, self.lambda_u)
            RatioConfig(self.r, self.batch_size, self.repetitions)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.alternate not in ("batch", "epoch"):
            raise ConfigError(f"alternate: unknown value {self.alternate!r}")
        for key in ("epochs_warmup", "epochs_finetune", "epochs_main"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be >= 0")
        for key in ("lr_warmup", "lr_finetune", "lr_main"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key}: must be > 0")
        if self.mode == "foc-light":
            bad = [name for name, ok in (("lambda_u", self.lambda_u == 0),
                                         ("repetitions", self.repetitions == 1),
                                         ("heads_per_type", self.heads_per_type == 1)) if not ok]
            if bad:
                raise ConfigError(f"{bad[0]}: not allowed in foc-light mode")

    @classmethod
    def light(cls, **overrides):
        base = dict(mode="foc-light", lambda_u=0.0, repetitions=1, heads_per_type=1, epochs_warmup=0)
        base.update(overrides)
        return cls(**base)

    @property
    def weights(self):
        return LossWeights(self.lambda_s, self.lambda_u)

    @property
    def ratio(self):
        return RatioConfig(self.r, self.batch_size, self.repetitions)

    def phases(self):
        if self.mode == "foc-light":
            return ["main"]
        if self.mode == "warmup-only":
            return ["warmup"]
        return [p for p in ("warmup", "finetune", "main") if self.epochs(p) > 0]

    def epochs(self, phase):
        return getattr(self, f"epochs_{phase}")

    def lr(self, phase):
        return getattr(self, f"lr_{phase}")


class LossBreakdown(NamedTuple):
    supervised: float
    unsupervised: float
    total: float


@dataclass
class TrainState:
    model: FuzzyOverclusterNet
    phase: str = ""
    epoch: int = 0
    done: list = field(default_factory=list)
    history: list = field(default_factory=list)
    best_f1: float = -math.inf
    best_state: Optional[dict] = None
    optimizer: Optional[torch.optim.Optimizer] = None
    step: int = 0


def alternate_schedule(batch_index: int) -> str:
    return "normal" if batch_index % 2 == 0 else "overcluster"


def _input_transform(images, policy):
    if policy.sobel:
        return kernels.sobel_batch(np.ascontiguousarray(images, dtype=np.float32))
    return images


def init_state(cfg: TrainConfig, split: DatasetSplit, k_gt: int) -> TrainState:
    """Build the model and set normalization statistics from the labeled pool."""
    images = np.stack([s.image for s in split.labeled]).astype(np.float32)
    x = _input_transform(images, cfg.augmentation)
    channels = x.shape[-1]
    if cfg.input_channels is not None and cfg.input_channels != channels:
        raise ConfigError(f"input_channels: config says {cfg.input_channels}, data gives {channels}")
    k = cfg.k if cfg.k is not None else 6 * k_gt
    try:
        mcfg = ModelConfig(k_gt=k_gt, k=k, heads_per_type=cfg.heads_per_type,
                           input_channels=channels, backbone=cfg.backbone, sobel=cfg.augmentation.sobel)
    except ValueError as exc:
        raise ConfigError(f"k: {exc}") from None
    model = build_network(mcfg, seed=cfg.seed)
    flat = x.reshape(-1, channels)
    model.set_normalization(flat.mean(axis=0), flat.std(axis=0))
    return TrainState(model=model)


def _make_optimizer(model, phase, cfg):
    if phase == "finetune":
        params = list(model.normal_heads.parameters()) + list(model.overcluster_heads.parameters())
    else:
        params = list(model.parameters())
    return torch.optim.Adam(params, lr=cfg.lr(phase), betas=(cfg.adam_beta1, cfg.adam_beta2))


def _set_phase_mode(model, phase):
    model.train()
    frozen = phase == "finetune"
    for p in model.backbone.parameters():
        p.requires_grad_(not frozen)
    if frozen:
        model.backbone.eval()


def _check(value, term):
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {term} loss ({value})")


def train_step(model, optimizer, batch, head_type: str, weights: LossWeights,
               mi_on_labeled=True, inverse_on_unlabeled=True) -> LossBreakdown:
    """One optimizer update of ``head_type`` heads (and the backbone unless frozen)."""
    n = len(batch)
    need_x3 = head_type == "overcluster" and weights.lambda_s > 0
    views = [batch.x1, batch.x2] + ([batch.x3] if need_x3 else [])
    x = to_tensor(np.concatenate(views))
    outs = model(x, head_type)[head_type]

    sup_terms, uns_terms, totals = [], [], []
    labeled = batch.labels >= 0
    if weights.lambda_s > 0:
        lab_idx = torch.from_numpy(np.flatnonzero(labeled))
        if head_type == "normal" and lab_idx.numel():
            width = outs[0].shape[1]
            target = torch.nn.functional.one_hot(torch.from_numpy(batch.labels[labeled]), width).to(outs[0].dtype)
        rows = torch.arange(n) if inverse_on_unlabeled else lab_idx
    pair_rows = None if mi_on_labeled else torch.from_numpy(np.flatnonzero(~labeled))

    for out in outs:
        u, v = out[:n], out[n:2 * n]
        loss = out.new_zeros(())
        if weights.lambda_s > 0:
            if head_type == "normal":
                if lab_idx.numel():
                    sup = 0.5 * (torch_cross_entropy(u[lab_idx], target) + torch_cross_entropy(v[lab_idx], target))
                else:
                    sup = out.new_zeros(())
            else:
                w = out[2 * n:]
                sup = torch_ce_inverse_loss(u[rows], v[rows], w[rows])
            loss = loss + weights.lambda_s * sup
            sup_terms.append(sup.item())
        else:
            sup_terms.append(0.0)
        pu, pv = (u, v) if pair_rows is None else (u[pair_rows], v[pair_rows])
        if pu.shape[0]:
            uns = -torch_mutual_information(pu, pv)
        else:
            uns = out.new_zeros(())
        uns_terms.append(uns.item())
        if weights.lambda_u > 0:
            loss = loss + weights.lambda_u * uns
        totals.append(loss)

    sup_v, uns_v = float(np.mean(sup_terms)), float(np.mean(uns_terms))
    _check(sup_v, "supervised")
    _check(uns_v, "unsupervised (mutual information)")
    total = torch.stack(totals).mean()
    _check(total.item(), "total")
    optimizer.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
        for p in model.parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise DivergenceError("non-finite gradient")
        optimizer.step()
    return LossBreakdown(sup_v, uns_v, total.item())


def validate(model, samples):
    """Best-head macro-F1 and accuracy per head type on ``samples``.

    Overclustering heads are mapped on ``samples`` themselves.
    """
    if not samples:
        return {}
    truths = hard_labels(samples)
    normal, over = forward_heads(model, np.stack([s.image for s in samples]))
    out = {}
    for name, probs in (("normal", normal), ("overcluster", over)):
        best = (-1.0, 0.0)
        for h in range(probs.shape[0]):
            pred = probs[h].argmax(axis=1)
            if name == "overcluster":
                pred = cluster_mapping(pred, truths, model.cfg.k, model.cfg.k_gt)(pred)
            best = max(best, (macro_f1(pred, truths, model.cfg.k_gt), accuracy(pred, truths)))
        out[name] = best
    return out


def run_phase(state: TrainState, phase: str, split: DatasetSplit, cfg: TrainConfig,
              out_dir=None, max_epochs: Optional[int] = None) -> TrainState:
    """Run (or continue) ``phase`` until its epoch budget or ``max_epochs`` new epochs."""
    order = cfg.phases()
    if phase not in order:
        raise ConfigError(f"phase {phase!r} is not part of mode {cfg.mode!r}")
    missing = [p for p in order[:order.index(phase)] if p not in state.done]
    if missing:
        raise ConfigError(f"phase {phase!r} requires {missing[0]!r} first")
    if state.phase != phase:
        state.phase, state.epoch, state.optimizer = phase, 0, None
    model = state.model
    supervised = phase != "warmup"
    weights = cfg.weights if supervised else LossWeights(0.0, 1.0)
    policy = cfg.augmentation
    sched = BatchSchedule(split, cfg.ratio, policy, seed=cfg.seed, phase=PHASE_IDS[phase],
                          supervised=supervised, class_balanced_inverse=cfg.class_balanced_inverse)
    if state.optimizer is None:
        state.optimizer = _make_optimizer(model, phase, cfg)
    _set_phase_mode(model, phase)
    val = split.validation if supervised else []

    total_epochs = cfg.epochs(phase)
    stop = total_epochs if max_epochs is None else min(total_epochs, state.epoch + max_epochs)
    while state.epoch < stop:
        e = state.epoch
        sums = {"normal": [], "overcluster": []}
        for b in range(sched.batches_per_epoch):
            head = alternate_schedule(b if cfg.alternate == "batch" else e)
            batch = sched.batch(e, b)
            res = train_step(model, state.optimizer, batch, head, weights,
                             mi_on_labeled=cfg.mi_on_labeled,
                             inverse_on_unlabeled=cfg.inverse_on_unlabeled)
            sums[head].append(res)
            state.step += 1
        scores = validate(model, val) if val else {}
        _set_phase_mode(model, phase)
        for head, rs in sums.items():
            if not rs:
                continue
            f1, acc = scores.get(head, (float("nan"), float("nan")))
            state.history.append({
                "phase": phase, "epoch": e, "head_type": head,
                "loss_s": float(np.mean([r.supervised for r in rs])),
                "loss_u": float(np.mean([r.unsupervised for r in rs])),
                "val_f1": f1, "val_acc": acc,
            })
        if "normal" in scores and scores["normal"][0] > state.best_f1:
            state.best_f1 = scores["normal"][0]
            state.best_state = copy.deepcopy(model.state_dict())
        logger.info("%s epoch %d/%d %s", phase, e + 1, total_epochs,
                    " ".join(f"{h}:f1={s[0]:.4f}" for h, s in scores.items()))
        state.epoch += 1
        if out_dir is not None:
            save_state(state, cfg, Path(out_dir) / "state.pt")
            write_metrics(state.history, Path(out_dir) / "metrics.csv")
    if state.epoch >= total_epochs and phase not in state.done:
        state.done.append(phase)
        if out_dir is not None:
            save_state(state, cfg, Path(out_dir) / "state.pt")
    return state


def fit(cfg: TrainConfig, split: DatasetSplit, k_gt: Optional[int] = None, out_dir=None,
        state: Optional[TrainState] = None) -> TrainState:
    """Run every phase of ``cfg.mode``, resuming ``state`` when given."""
    if state is None:
        state = init_state(cfg, split, k_gt if k_gt is not None else split.num_classes)
    for phase in cfg.phases():
        if phase in state.done:
            continue
        run_phase(state, phase, split, cfg, out_dir=out_dir)
    if out_dir is not None:
        finalize(state, out_dir)
    return state


def finalize(state: TrainState, out_dir):
    """Write ``last.pt``, ``best.pt`` and ``metrics.csv``; returns the best checkpoint path."""
    out_dir = Path(out_dir)
    phase = state.phase or "main"
    save_checkpoint(out_dir / "last.pt", state.model, phase=phase)
    best_model = state.model
    if state.best_state is not None:
        best_model = copy.deepcopy(state.model)
        best_model.load_state_dict(state.best_state)
    save_checkpoint(out_dir / "best.pt", best_model, phase=phase, best_val_f1=state.best_f1)
    write_metrics(state.history, out_dir / "metrics.csv")
    return out_dir / "best.pt"


def best_model(state: TrainState) -> FuzzyOverclusterNet:
    if state.best_state is None:
        return state.model
    m = copy.deepcopy(state.model)
    m.load_state_dict(state.best_state)
    m.eval()
    return m


def write_metrics(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def save_state(state: TrainState, cfg: TrainConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save({
        "format_version": STATE_FORMAT,
        "train_config": _config_dict(cfg),
        "model_config": asdict(state.model.cfg),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict() if state.optimizer is not None else None,
        "phase": state.phase, "epoch": state.epoch, "done": list(state.done),
        "history": state.history, "best_f1": state.best_f1, "best_state": state.best_state,
        "step": state.step,
    }, tmp)
    tmp.replace(path)


def load_state(path, cfg: TrainConfig) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != STATE_FORMAT:
        raise ConfigError(f"{path}: unsupported training state format")
    if payload["train_config"] != _config_dict(cfg):
        raise ConfigError(f"{path}: training state was produced by a different config")
    model = FuzzyOverclusterNet(ModelConfig(**payload["model_config"])).to(memory_format=torch.channels_last)
    model.load_state_dict(payload["model"])
    state = TrainState(model=model, phase=payload["phase"], epoch=payload["epoch"],
                       done=payload["done"], history=payload["history"],
                       best_f1=payload["best_f1"], best_state=payload["best_state"],
                       step=payload["step"])
    if payload["optimizer"] is not None and state.phase:
        _set_phase_mode(model, state.phase)
        state.optimizer = _make_optimizer(model, state.phase, cfg)
        state.optimizer.load_state_dict(payload["optimizer"])
    return state


def _config_dict(cfg: TrainConfig):
    d = asdict(cfg)
    d["augmentation"] = asdict(cfg.augmentation)
    return d
