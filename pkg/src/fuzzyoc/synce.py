"""Synthetic circles-and-ellipses dataset with analytic fuzzy labels.

Six classes in the order red, green, blue circle followed by red, green, blue
ellipse. A bubble with hue ``h`` and axis ratio ``rho`` gets the label
``outer(color_distribution(h), geometry_distribution(rho))`` flattened so the
geometry index is the major axis.
"""

from __future__ import annotations

import colorsys
import csv
import logging
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DataError, LabelDistribution, hard_label

logger = logging.getLogger(__name__)

ANCHOR_HUES = (0.0, 120.0, 240.0)
CLASS_NAMES = ("red-circle", "green-circle", "blue-circle",
               "red-ellipse", "green-ellipse", "blue-ellipse")
NUM_CLASSES = 6
VOTE_SCALE = 1000
SUPERSAMPLE = 4
SPLIT_ORDER = ("train", "val", "unlabeled")

# placement ranges, as fractions of the image width
SEMI_MINOR_RANGE = (0.10, 0.20)
CENTER_RANGE = (0.2, 0.8)


class SynSubsetKind(str, Enum):
    IDEAL = "ideal"
    REAL = "real"
    FUZZY = "fuzzy"


@dataclass(frozen=True)
class BubbleParams:
    hue: float
    axis_ratio: float
    center: tuple
    semi_minor_axis: float
    rotation: float

    def __post_init__(self):
        if not 0.0 <= self.hue < 360.0:
            raise DataError(f"hue {self.hue} outside [0, 360)")
        if not 1.0 <= self.axis_ratio <= 2.0:
            raise DataError(f"axis ratio {self.axis_ratio} outside [1, 2]")
        if self.semi_minor_axis <= 0:
            raise DataError("semi-minor axis must be positive")

    @property
    def half_extent(self):
        """Axis-aligned half height and half width of the rotated ellipse."""
        a = self.semi_minor_axis * self.axis_ratio
        b = self.semi_minor_axis
        t = np.deg2rad(self.rotation)
        half_w = np.sqrt((a * np.cos(t)) ** 2 + (b * np.sin(t)) ** 2)
        half_h = np.sqrt((a * np.sin(t)) ** 2 + (b * np.cos(t)) ** 2)
        return float(half_h), float(half_w)

    def fits(self, image_size) -> bool:
        hh, hw = self.half_extent
        r, c = self.center
        return (r - hh >= 0 and r + hh <= image_size
                and c - hw >= 0 and c + hw <= image_size)


def color_distribution(hue: float) -> np.ndarray:
    """Linear interpolation between the red/green/blue anchor hues."""
    if not 0.0 <= hue < 360.0:
        raise DataError(f"hue {hue} outside [0, 360)")
    out = np.zeros(3)
    lo = int(hue // 120.0)
    hi = (lo + 1) % 3
    frac = (hue - 120.0 * lo) / 120.0
    out[lo] = 1.0 - frac
    out[hi] += frac
    return out


def geometry_distribution(axis_ratio: float) -> np.ndarray:
    if not 1.0 <= axis_ratio <= 2.0:
        raise DataError(f"axis ratio {axis_ratio} outside [1, 2]")
    return np.array([2.0 - axis_ratio, axis_ratio - 1.0])


def fuzzy_label(p_color, p_geometry) -> LabelDistribution:
    return LabelDistribution(np.outer(p_geometry, p_color).ravel())


def bubble_label(hue: float, axis_ratio: float) -> LabelDistribution:
    return fuzzy_label(color_distribution(hue), geometry_distribution(axis_ratio))


def is_certain_bubble(hue: float, axis_ratio: float) -> bool:
    return hue in ANCHOR_HUES and axis_ratio in (1.0, 2.0)


def render_bubble(params: BubbleParams, image_size: int) -> np.ndarray:
    """Filled ellipse on black, ``SUPERSAMPLE``-squared coverage anti-aliasing."""
    if not params.fits(image_size):
        raise DataError(f"bubble {params} does not fit a {image_size}px image")
    ss = SUPERSAMPLE
    coords = (np.arange(image_size * ss) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dy = yy - params.center[0]
    dx = xx - params.center[1]
    t = np.deg2rad(params.rotation)
    # rotation is measured counter-clockwise with rows pointing down
    u = dx * np.cos(t) - dy * np.sin(t)
    v = dx * np.sin(t) + dy * np.cos(t)
    a = params.semi_minor_axis * params.axis_ratio
    b = params.semi_minor_axis
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    coverage = inside.reshape(image_size, ss, image_size, ss).mean(axis=(1, 3))
    rgb = np.array(colorsys.hsv_to_rgb(params.hue / 360.0, 1.0, 1.0))
    return (coverage[:, :, None] * rgb[None, None, :]).astype(np.float32)


def sample_real_label(label: LabelDistribution, rng: np.random.Generator) -> int:
    return int(rng.choice(len(label.probs), p=label.probs))


def random_placement(rng, image_size, axis_ratio, hue):
    semi_minor = rng.uniform(*SEMI_MINOR_RANGE) * image_size
    rotation = rng.uniform(0.0, 180.0)
    probe = BubbleParams(hue, axis_ratio, (0.0, 0.0), semi_minor, rotation)
    hh, hw = probe.half_extent
    lo, hi = CENTER_RANGE[0] * image_size, CENTER_RANGE[1] * image_size
    row = rng.uniform(max(lo, hh), min(hi, image_size - hh))
    col = rng.uniform(max(lo, hw), min(hi, image_size - hw))
    return BubbleParams(hue, axis_ratio, (row, col), semi_minor, rotation)


def _fuzzy_hue(rng):
    while True:
        h = rng.uniform(0.0, 360.0)
        if h not in ANCHOR_HUES:
            return h


def _fuzzy_ratio(rng):
    while True:
        r = rng.uniform(1.0, 2.0)
        if r != 1.0:
            return r


def _votes(label: LabelDistribution):
    return np.rint(label.probs * VOTE_SCALE).astype(np.int64)


@dataclass(frozen=True)
class SynceRecord:
    path: str
    split: str
    hue: float
    axis_ratio: float
    label: LabelDistribution
    certain: bool
    real_class: int


@dataclass(frozen=True)
class SynceBuild:
    root: Path
    manifests: dict
    meta: Path
    records: tuple

    def counts(self):
        out = {}
        for r in self.records:
            key = (r.split, "certain" if r.certain else "fuzzy")
            out[key] = out.get(key, 0) + 1
        return out


def build_synce(out_dir, certain_count=1800, fuzzy_count=1000, image_size=32, seed=0) -> SynceBuild:
    """Render every split and write the Ideal, Real and Fuzzy manifests.

    Image ``i`` (counted across train, val, unlabeled in that order) draws all
    of its randomness from ``default_rng([seed, i])``.
    """
    out_dir = Path(out_dir)
    if certain_count % NUM_CLASSES:
        warnings.warn(f"certain_count={certain_count} is not divisible by {NUM_CLASSES}; "
                      "classes are balanced up to one image", stacklevel=2)
    records = []
    index = 0
    for split in SPLIT_ORDER:
        img_dir = out_dir / "images" / split
        img_dir.mkdir(parents=True, exist_ok=True)
        for j in range(certain_count + fuzzy_count):
            rng = np.random.default_rng([seed, index])
            if j < certain_count:
                cls = j % NUM_CLASSES
                hue, ratio = ANCHOR_HUES[cls % 3], float(1 + cls // 3)
            else:
                hue, ratio = _fuzzy_hue(rng), _fuzzy_ratio(rng)
            params = random_placement(rng, image_size, ratio, hue)
            label = bubble_label(hue, ratio)
            real = sample_real_label(label, rng)
            rel = f"images/{split}/{split}_{j:05d}.png"
            img = render_bubble(params, image_size)
            Image.fromarray(np.rint(img * 255).astype(np.uint8), mode="RGB").save(out_dir / rel)
            records.append(SynceRecord(rel, split, hue, ratio, label,
                                       is_certain_bubble(hue, ratio), real))
            index += 1

    manifests = {kind.value: out_dir / f"manifest_{kind.value}.csv" for kind in SynSubsetKind}
    for kind in SynSubsetKind:
        _write_manifest(manifests[kind.value], _manifest_rows(records, kind))
    meta = out_dir / "synce_meta.csv"
    with open(meta, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "hue", "axis_ratio"] + [f"l_{c}" for c in range(NUM_CLASSES)])
        for r in records:
            w.writerow([r.path, repr(r.hue), repr(r.axis_ratio)] + [repr(float(p)) for p in r.label.probs])
    logger.info("wrote %d images to %s", len(records), out_dir)
    return SynceBuild(out_dir, manifests, meta, tuple(records))


def _one_hot_votes(c):
    v = np.zeros(NUM_CLASSES, dtype=np.int64)
    v[c] = VOTE_SCALE
    return v


def _manifest_rows(records, kind: SynSubsetKind):
    rows = []
    for r in records:
        if r.certain or r.split == "unlabeled":
            rows.append((r.path, r.split, _votes(r.label)))
        elif kind is SynSubsetKind.IDEAL:
            rows.append((r.path, r.split, _one_hot_votes(hard_label(r.label))))
        elif kind is SynSubsetKind.REAL:
            rows.append((r.path, r.split, _one_hot_votes(r.real_class)))
        elif r.split == "train":
            rows.append((r.path, "unlabeled", _votes(r.label)))
        # fuzzy validation images are dropped from the Fuzzy subset
    return rows


def _write_manifest(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "split"] + [f"vote_{c}" for c in range(NUM_CLASSES)])
        for p, split, votes in rows:
            w.writerow([p, split] + [int(v) for v in votes])
