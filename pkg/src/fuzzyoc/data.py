"""Label, sample and dataset types plus manifest ingestion.

Manifests are CSV files with header ``path,split,vote_0,...,vote_{k-1}``.
Votes are raw annotator counts; the fuzzy label is their mean.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

CERTAIN_TOL = 1e-6
SPLITS = ("train", "val", "unlabeled", "auto")


class DataError(ValueError):
    """Raised for invalid labels, malformed manifests and unusable splits."""


class ConfigError(ValueError):
    """Raised when a dataset cannot support the requested training setup."""


@dataclass(frozen=True)
class LabelDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise DataError("label distribution must be a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
            raise DataError(f"not a probability vector: {p.tolist()}")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return self.probs.size


@dataclass(frozen=True)
class AnnotationSet:
    votes: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.votes)
        if v.ndim != 1 or v.size == 0:
            raise DataError("vote vector must be one-dimensional and non-empty")
        if not np.issubdtype(v.dtype, np.integer):
            if np.any(v != np.round(v)):
                raise DataError(f"votes must be integer counts: {v.tolist()}")
            v = v.astype(np.int64)
        if np.any(v < 0):
            raise DataError(f"votes must be non-negative: {v.tolist()}")
        v = v.astype(np.int64)
        v.setflags(write=False)
        object.__setattr__(self, "votes", v)


@dataclass(frozen=True, eq=False)
class Sample:
    """One image with an optional fuzzy label.

    ``image`` is ``H x W x C`` float32 in ``[0, 1]``. ``path`` doubles as the
    sample identity.
    """

    image: np.ndarray
    label: Optional[LabelDistribution] = None
    certain: bool = False
    path: str = ""

    def __post_init__(self):
        if self.certain:
            if self.label is None or not is_certain(self.label):
                raise DataError(f"sample {self.path!r} flagged certain without a one-hot label")


@dataclass
class DatasetSplit:
    labeled: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)
    validation: list = field(default_factory=list)

    def __post_init__(self):
        for s in self.labeled:
            if not s.certain:
                raise DataError(f"labeled pool holds non-certain sample {s.path!r}")
        ids = {_identity(s) for s in self.labeled}
        if any(_identity(s) in ids for s in self.unlabeled):
            raise DataError("labeled and unlabeled pools overlap")

    @property
    def num_classes(self) -> int:
        for pool in (self.labeled, self.validation, self.unlabeled):
            for s in pool:
                if s.label is not None:
                    return len(s.label)
        raise DataError("no labeled sample to infer the class count from")


def _identity(s):
    return s.path or id(s)


def aggregate_annotations(votes: AnnotationSet | Sequence[int]) -> LabelDistribution:
    """Mean over annotations: ``votes / votes.sum()``."""
    if not isinstance(votes, AnnotationSet):
        votes = AnnotationSet(np.asarray(votes))
    total = votes.votes.sum()
    if total < 1:
        raise DataError("annotation set has no votes")
    return LabelDistribution(votes.votes / total)


def is_certain(label: LabelDistribution) -> bool:
    return bool(label.probs.max() >= 1.0 - CERTAIN_TOL)


def hard_label(label: LabelDistribution | np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. lowest index on ties
    probs = label.probs if isinstance(label, LabelDistribution) else np.asarray(label)
    return int(np.argmax(probs))


def one_hot(index: int, k: int) -> LabelDistribution:
    p = np.zeros(k)
    p[index] = 1.0
    return LabelDistribution(p)


def partition_dataset(samples, split_of=None, val_fraction=0.2, seed=0) -> DatasetSplit:
    """Route certain samples to the labeled pool and everything else to unlabeled.

    ``split_of`` optionally maps a sample to one of ``train``, ``val``,
    ``unlabeled`` or ``auto``. Explicit ``val`` wins. Samples marked ``auto``
    (the default) that are certain are split off into validation by a seeded,
    class-stratified ``val_fraction``.
    """
    labeled, unlabeled, validation, auto_certain = [], [], [], []
    for s in samples:
        where = split_of(s) if split_of is not None else "auto"
        if where not in SPLITS:
            raise DataError(f"unknown split {where!r} for {s.path!r}")
        if where == "val":
            validation.append(s)
        elif where == "unlabeled" or not s.certain:
            if where == "train":
                logger.warning("train row %s is not certain; using it as unlabeled", s.path)
            unlabeled.append(s)
        elif where == "train":
            labeled.append(s)
        else:
            auto_certain.append(s)

    if auto_certain and val_fraction > 0:
        rng = np.random.default_rng(seed)
        by_class: dict[int, list] = {}
        for s in auto_certain:
            by_class.setdefault(hard_label(s.label), []).append(s)
        for c in sorted(by_class):
            group = by_class[c]
            order = rng.permutation(len(group))
            n_val = int(round(val_fraction * len(group)))
            for rank, idx in enumerate(order):
                (validation if rank < n_val else labeled).append(group[idx])
    else:
        labeled.extend(auto_certain)

    if not labeled:
        raise ConfigError("no certain samples in the labeled pool; training is impossible")
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled, validation=validation)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def read_manifest(manifest: Path):
    """Parse a manifest into ``(path, split, votes)`` rows without touching images."""
    manifest = Path(manifest)
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    rows = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{manifest}: empty manifest") from None
        vote_cols = header[2:]
        if header[:2] != ["path", "split"] or not vote_cols or any(
            col != f"vote_{i}" for i, col in enumerate(vote_cols)
        ):
            raise DataError(f"{manifest}: bad header {header}")
        k = len(vote_cols)
        if k < 2:
            raise DataError(f"{manifest}: need at least two vote columns, got {k}")
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != k + 2:
                raise DataError(f"{manifest}:{lineno}: expected {k} vote columns, got {len(row) - 2}")
            path, split = row[0], row[1]
            if split not in SPLITS:
                raise DataError(f"{manifest}:{lineno}: unknown split {split!r}")
            if path in seen:
                raise DataError(f"{manifest}:{lineno}: duplicate path {path!r}")
            seen.add(path)
            try:
                votes = np.array([int(v) for v in row[2:]], dtype=np.int64)
            except ValueError:
                raise DataError(f"{manifest}:{lineno}: non-integer vote in {row[2:]}") from None
            if np.any(votes < 0):
                raise DataError(f"{manifest}:{lineno}: negative vote")
            rows.append((lineno, path, split, votes))
    return k, rows


def load_manifest(directory, manifest, val_fraction=0.2, seed=0) -> DatasetSplit:
    """Load images and labels listed in ``manifest`` relative to ``directory``.

    A row with all-zero votes is only allowed in the ``unlabeled`` split and
    yields a sample without a label.
    """
    directory = Path(directory)
    _, rows = read_manifest(manifest)
    samples, splits = [], {}
    for lineno, path, split, votes in rows:
        if votes.sum() == 0:
            if split != "unlabeled":
                raise DataError(f"{manifest}:{lineno}: row without votes must be unlabeled")
            label = None
        else:
            label = aggregate_annotations(AnnotationSet(votes))
        file = directory / path
        if not file.is_file():
            raise DataError(f"{manifest}:{lineno}: image not found: {file}")
        try:
            image = load_image(file)
        except OSError as exc:
            raise DataError(f"{manifest}:{lineno}: cannot read {file}: {exc}") from None
        s = Sample(image=image, label=label,
                   certain=label is not None and is_certain(label), path=path)
        samples.append(s)
        splits[path] = split
    return partition_dataset(samples, split_of=lambda s: splits[s.path],
                             val_fraction=val_fraction, seed=seed)


def stack_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


def hard_labels(samples) -> np.ndarray:
    return np.array([hard_label(s.label) for s in samples], dtype=np.int64)
