"""Triple construction, augmentation and ratio-restricted batching.

Each training item yields three views ``(x1, x2, x3)``:

* labeled item: ``x1 = g1(x)``, ``x2 = g2(x'')`` with ``x''`` another labeled
  image of the same class, ``x3 = g3(x')`` with ``x'`` a labeled image of a
  different class;
* unlabeled item (or any item when running unsupervised): ``x1 = g1(x)``,
  ``x2 = g2(x)``, ``x3 = g3(x')`` with ``x'`` drawn from the whole pool.

Batches hold exactly ``floor(r * batch_size)`` unlabeled items. The unlabeled
pool is consumed round-robin through a chain of seeded permutations so every
unlabeled image is seen within two passes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .data import ConfigError, DatasetSplit, hard_label

logger = logging.getLogger(__name__)

_ORDER, _BATCH, _UNLABELED = 1, 2, 3


@dataclass(frozen=True)
class AugmentationPolicy:
    crop: tuple = (0.6, 1.0)
    flip_prob: float = 0.5
    brightness: float = 0.25
    hue: float = 18.0
    sobel: bool = False

    def __post_init__(self):
        lo, hi = self.crop
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop range must satisfy 0 < lo <= hi <= 1, got {self.crop}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip probability must be in [0, 1]")
        if not 0.0 <= self.brightness < 1.0:
            raise ValueError("brightness jitter must be in [0, 1)")
        if not 0.0 <= self.hue <= 180.0:
            raise ValueError("hue jitter must be in [0, 180] degrees")

    @classmethod
    def identity(cls, sobel=False):
        return cls(crop=(1.0, 1.0), flip_prob=0.0, brightness=0.0, hue=0.0, sobel=sobel)

    def output_channels(self, channels: int) -> int:
        return 2 if self.sobel else channels


def draw_augmentations(policy: AugmentationPolicy, rng: np.random.Generator, n: int, height: int, width: int):
    """Draw crop/flip/brightness/hue parameters for ``n`` images.

    The crop is square in relative terms so shapes keep their aspect ratio.
    """
    scale = rng.uniform(policy.crop[0], policy.crop[1], size=n)
    top = rng.random(n) * (height - scale * height)
    left = rng.random(n) * (width - scale * width)
    flip = rng.random(n) < policy.flip_prob
    bright = 1.0 + rng.uniform(-policy.brightness, policy.brightness, size=n)
    hue = rng.uniform(-policy.hue, policy.hue, size=n)
    crop = np.stack([top, left, scale], axis=1)
    return crop, flip, bright, hue


def augment_many(images: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    images = np.ascontiguousarray(images, dtype=np.float32)
    n, h, w, _ = images.shape
    crop, flip, bright, hue = draw_augmentations(policy, rng, n, h, w)
    out = kernels.augment_batch(images, crop, flip, bright, hue)
    if policy.sobel:
        out = kernels.sobel_batch(out)
    return out


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    return augment_many(np.asarray(image)[None], policy, rng)[0]


@dataclass(frozen=True)
class RatioConfig:
    r: float = 0.5
    batch_size: int = 32
    repetitions: int = 3

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"r must lie in [0, 1], got {self.r}")
        if self.batch_size < 1 or self.repetitions < 1:
            raise ValueError("batch_size and repetitions must be positive")

    @property
    def unlabeled_per_batch(self) -> int:
        return math.floor(self.r * self.batch_size + 1e-9)

    @property
    def labeled_per_batch(self) -> int:
        return self.batch_size - self.unlabeled_per_batch


@dataclass
class TripleItem:
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    label: Optional[int]
    labeled: bool
    sources: tuple = ()

    def __post_init__(self):
        if self.labeled and self.label is None:
            raise ValueError("labeled triple needs a label")
        if not (self.x1.shape == self.x2.shape == self.x3.shape):
            raise ValueError("triple views differ in shape")


@dataclass
class TripleBatch:
    """A batch of triples in array form.

    ``labels`` is ``-1`` for unlabeled rows (and for every row when the batch
    was built without supervision). ``sources`` holds pool indices of the
    images behind ``x1``, ``x2`` and ``x3``; ``items`` the underlying item index.
    """

    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    labels: np.ndarray
    labeled: np.ndarray
    sources: np.ndarray
    items: np.ndarray

    def __len__(self):
        return self.labels.shape[0]

    def triples(self):
        for i in range(len(self)):
            lab = int(self.labels[i]) if self.labels[i] >= 0 else None
            yield TripleItem(self.x1[i], self.x2[i], self.x3[i], lab,
                             bool(self.labeled[i]) and lab is not None,
                             tuple(int(s) for s in self.sources[i]))


class TriplePools:
    """Index view of the training pools.

    Pool index ``i < n_labeled`` is a labeled sample, the rest are unlabeled.
    Labels are only read when ``supervised`` is true.
    """

    def __init__(self, labeled, unlabeled, supervised=True, class_balanced_inverse=False):
        self.images = np.ascontiguousarray(
            np.stack([s.image for s in list(labeled) + list(unlabeled)]), dtype=np.float32)
        self.n_labeled = len(labeled)
        self.n_unlabeled = len(unlabeled)
        self.supervised = supervised
        self.class_balanced_inverse = class_balanced_inverse
        self.classes = None
        if supervised:
            self.classes = np.array([hard_label(s.label) for s in labeled], dtype=np.int64)
            self.by_class = {int(c): np.flatnonzero(self.classes == c) for c in np.unique(self.classes)}
            self.others = {c: np.flatnonzero(self.classes != c) for c in self.by_class}
            self.position = np.empty(self.n_labeled, dtype=np.int64)
            for idx in self.by_class.values():
                self.position[idx] = np.arange(idx.size)
            self._warned = set()

    @property
    def size(self):
        return self.n_labeled + self.n_unlabeled

    def choose(self, idx: int, rng: np.random.Generator):
        """Return ``(i1, i2, i3, label)`` for pool index ``idx``."""
        if self.supervised and idx < self.n_labeled:
            y = int(self.classes[idx])
            same = self.by_class[y]
            if same.size < 2:
                if y not in self._warned:
                    logger.warning("class %d has a single labeled exemplar; x2 falls back to g2(x)", y)
                    self._warned.add(y)
                i2 = idx
            else:
                j = int(rng.integers(same.size - 1))
                if j >= self.position[idx]:
                    j += 1
                i2 = int(same[j])
            other = self.others[y]
            if other.size == 0:
                raise ConfigError("inverse examples need labeled samples of at least two classes")
            if self.class_balanced_inverse:
                choices = [c for c in self.by_class if c != y]
                c = choices[int(rng.integers(len(choices)))]
                i3 = int(self.by_class[c][int(rng.integers(self.by_class[c].size))])
            else:
                i3 = int(other[int(rng.integers(other.size))])
            return idx, i2, i3, y
        i3 = int(rng.integers(self.size))
        return idx, idx, i3, -1


def compose_triple(x, labeled_pool, full_pool, policy: AugmentationPolicy, rng, supervised=True) -> TripleItem:
    """Build one triple for sample ``x`` from sample lists.

    ``full_pool`` is the union of labeled and unlabeled samples; ``x`` is
    treated as labeled iff it is one of ``labeled_pool``.
    """
    labeled_ids = {id(s) for s in labeled_pool}
    unlabeled = [s for s in full_pool if id(s) not in labeled_ids]
    pools = TriplePools(labeled_pool, unlabeled, supervised=supervised)
    everything = list(labeled_pool) + unlabeled
    idx = next(i for i, s in enumerate(everything) if s is x)
    i1, i2, i3, y = pools.choose(idx, rng)
    views = [augment(pools.images[i], policy, rng) for i in (i1, i2, i3)]
    labeled = supervised and idx < pools.n_labeled
    return TripleItem(*views, label=y if labeled else None, labeled=labeled,
                      sources=(everything[i1], everything[i2], everything[i3]))


class BatchSchedule:
    """Deterministic batch stream for one training phase.

    Every batch ``(epoch, b)`` draws from ``default_rng([seed, phase, epoch, b])``,
    so any batch can be rebuilt independently, which makes resuming exact.
    """

    def __init__(self, split: DatasetSplit, cfg: RatioConfig, policy: AugmentationPolicy,
                 seed: int = 0, phase: int = 0, supervised: bool = True,
                 class_balanced_inverse: bool = False):
        if not split.labeled:
            raise ConfigError("labeled pool is empty")
        if cfg.labeled_per_batch == 0:
            raise ConfigError("r leaves no room for labeled items in a batch")
        if cfg.unlabeled_per_batch and not split.unlabeled:
            raise ConfigError("r > 0 but the unlabeled pool is empty")
        self.cfg = cfg
        self.policy = policy
        self.seed = seed
        self.phase = phase
        self.pools = TriplePools(split.labeled, split.unlabeled, supervised=supervised,
                                 class_balanced_inverse=class_balanced_inverse)
        self._unlabeled_order = None

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.pools.n_labeled / self.cfg.labeled_per_batch)

    def _rng(self, *key):
        return np.random.default_rng([self.seed, self.phase, *key])

    def labeled_indices(self, epoch: int, b: int) -> np.ndarray:
        n, L = self.pools.n_labeled, self.cfg.labeled_per_batch
        order = self._rng(_ORDER, epoch).permutation(n)
        pos = (np.arange(b * L, (b + 1) * L)) % n
        return order[pos]

    def unlabeled_indices(self, epoch: int, b: int) -> np.ndarray:
        """Round-robin over one fixed permutation, so any ``ceil(n / U)``
        consecutive batches cover every unlabeled sample."""
        U, n = self.cfg.unlabeled_per_batch, self.pools.n_unlabeled
        if U == 0:
            return np.empty(0, dtype=np.int64)
        if self._unlabeled_order is None:
            self._unlabeled_order = self._rng(_UNLABELED).permutation(n)
        start = (epoch * self.batches_per_epoch + b) * U
        return self._unlabeled_order[np.arange(start, start + U) % n] + self.pools.n_labeled

    def batch(self, epoch: int, b: int) -> TripleBatch:
        rng = self._rng(_BATCH, epoch, b)
        items = np.concatenate([self.labeled_indices(epoch, b), self.unlabeled_indices(epoch, b)])
        items = np.repeat(items, self.cfg.repetitions)
        chosen = [self.pools.choose(int(i), rng) for i in items]
        src = np.array([c[:3] for c in chosen], dtype=np.int64).reshape(-1, 3)
        labels = np.array([c[3] for c in chosen], dtype=np.int64)
        views = [augment_many(self.pools.images[src[:, v]], self.policy, rng) for v in range(3)]
        return TripleBatch(views[0], views[1], views[2], labels,
                           items < self.pools.n_labeled, src, items)

    def epoch(self, epoch: int, start: int = 0):
        for b in range(start, self.batches_per_epoch):
            yield self.batch(epoch, b)


def make_batches(split: DatasetSplit, cfg: RatioConfig, policy: AugmentationPolicy, seed: int = 0,
                 epochs: Optional[int] = None, supervised: bool = True, phase: int = 0):
    """Yield batches epoch after epoch (forever when ``epochs`` is None)."""
    sched = BatchSchedule(split, cfg, policy, seed=seed, phase=phase, supervised=supervised)
    e = 0
    while epochs is None or e < epochs:
        yield from sched.epoch(e)
        e += 1
