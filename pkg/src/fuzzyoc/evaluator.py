"""Classification metrics, cluster-to-class mapping and cluster consistency."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .data import DataError, hard_labels
from .network import forward_heads


def _as_labels(predictions, truths):
    p = np.asarray(predictions, dtype=np.int64).ravel()
    t = np.asarray(truths, dtype=np.int64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} truths")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def accuracy(predictions, truths) -> float:
    p, t = _as_labels(predictions, truths)
    return float(np.mean(p == t))


def per_class_f1(predictions, truths, k_gt):
    """F1 per class; ``nan`` for classes absent from ``truths``."""
    p, t = _as_labels(predictions, truths)
    if p.max() >= k_gt or t.max() >= k_gt or min(p.min(), t.min()) < 0:
        raise ValueError(f"class ids must lie in [0, {k_gt})")
    conf = kernels.contingency(t, p, k_gt, k_gt)
    tp = np.diag(conf).astype(np.float64)
    fn = conf.sum(axis=1) - tp
    fp = conf.sum(axis=0) - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    return np.where(conf.sum(axis=1) > 0, f1, np.nan)


def macro_f1(predictions, truths, k_gt) -> float:
    """Unweighted mean of per-class F1 over the classes present in ``truths``."""
    return float(np.nanmean(per_class_f1(predictions, truths, k_gt)))


@dataclass(frozen=True)
class ClusterMapping:
    assignment: np.ndarray
    source: str = ""

    def __call__(self, clusters):
        return self.assignment[np.asarray(clusters, dtype=np.int64)]

    def as_dict(self):
        return {int(c): int(y) for c, y in enumerate(self.assignment)}


def cluster_mapping(assignments, truths, k, k_gt, source="") -> ClusterMapping:
    """Map each cluster to its majority class.

    Ties go to the lowest class id; empty clusters take the overall most
    frequent class.
    """
    a = np.asarray(assignments, dtype=np.int64).ravel()
    t = np.asarray(truths, dtype=np.int64).ravel()
    if a.shape != t.shape:
        raise ValueError("assignments and truths must be aligned")
    counts = kernels.contingency(a, t, k, k_gt)
    fallback = int(np.argmax(counts.sum(axis=0)))
    out = np.argmax(counts, axis=1)
    out[counts.sum(axis=1) == 0] = fallback
    return ClusterMapping(out.astype(np.int64), source)


@dataclass
class ConsistencyReport:
    overall: float
    per_cluster: list = field(default_factory=list)
    mean: float = float("nan")
    std: float = float("nan")

    def as_dict(self):
        return {
            "overall": self.overall,
            "per_cluster_mean": self.mean,
            "per_cluster_std": self.std,
            "per_cluster": [{"cluster": c, "size": n, "consistent": f} for c, n, f in self.per_cluster],
        }


def consistency_score(assignments, judgments) -> ConsistencyReport:
    """Overall and per-cluster fraction of images judged consistent.

    The per-cluster spread is the population standard deviation.
    """
    a = np.asarray(assignments, dtype=np.int64).ravel()
    j = np.asarray(judgments, dtype=bool).ravel()
    if a.shape != j.shape:
        raise ValueError("judgments must be aligned with assignments")
    if a.size == 0:
        raise ValueError("empty input")
    per = []
    for c in np.unique(a):
        m = a == c
        per.append((int(c), int(m.sum()), float(j[m].mean())))
    fr = np.array([f for _, _, f in per])
    return ConsistencyReport(float(j.sum() / j.size), per, float(fr.mean()), float(fr.std()))


class ProxyJudgments:
    """Consistent iff the ground-truth hard label equals the cluster majority."""

    name = "proxy"

    def __init__(self, truths, k_gt):
        self.truths = np.asarray(truths, dtype=np.int64)
        self.k_gt = k_gt

    def judge(self, paths, assignments, k):
        mapping = cluster_mapping(assignments, self.truths, k, self.k_gt)
        return mapping(assignments) == self.truths


class FileJudgments:
    """Expert judgments from a CSV with header ``path,cluster,consistent``."""

    name = "file"

    def __init__(self, path):
        self.path = Path(path)
        self.table = {}
        with open(self.path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or set(reader.fieldnames) < {"path", "cluster", "consistent"}:
                raise DataError(f"{self.path}: header must be path,cluster,consistent")
            for lineno, row in enumerate(reader, start=2):
                val = row["consistent"].strip().lower()
                if val not in {"0", "1", "true", "false", "yes", "no"}:
                    raise DataError(f"{self.path}:{lineno}: bad consistent value {row['consistent']!r}")
                self.table[row["path"]] = (int(row["cluster"]), val in {"1", "true", "yes"})

    def judge(self, paths, assignments, k):
        out = np.zeros(len(paths), dtype=bool)
        for i, (p, a) in enumerate(zip(paths, assignments)):
            if p not in self.table:
                raise DataError(f"no expert judgment for {p!r}")
            cluster, ok = self.table[p]
            if cluster != int(a):
                raise DataError(f"{p!r} judged in cluster {cluster} but assigned to {int(a)}")
            out[i] = ok
        return out


def _score_heads(normal, over, truths, k_gt, mappings):
    rows = {"normal": [], "overcluster": []}
    for h in range(normal.shape[0]):
        pred = normal[h].argmax(axis=1)
        rows["normal"].append({"head": h, "accuracy": accuracy(pred, truths),
                               "macro_f1": macro_f1(pred, truths, k_gt)})
    for h in range(over.shape[0]):
        pred = mappings[h](over[h].argmax(axis=1))
        rows["overcluster"].append({"head": h, "accuracy": accuracy(pred, truths),
                                    "macro_f1": macro_f1(pred, truths, k_gt)})
    return rows


def evaluate_model(model, target, mapping_source=None, validation=None, judgments=None,
                   target_name="target", examples_per_cluster=10):
    """Score every head on ``target`` and pick the best head per type.

    Overclustering heads are mapped to classes by majority vote on
    ``mapping_source`` (default: ``target``). Best heads are chosen by
    validation macro-F1 when ``validation`` is given, else on ``target``.
    Ground truth is the hard label of each sample.
    """
    cfg = model.cfg
    mapping_source = target if mapping_source is None else mapping_source
    t_img = np.stack([s.image for s in target])
    t_true = hard_labels(target)
    t_norm, t_over = forward_heads(model, t_img)
    if mapping_source is target:
        m_over, m_true = t_over, t_true
    else:
        _, m_over = forward_heads(model, np.stack([s.image for s in mapping_source]))
        m_true = hard_labels(mapping_source)
    mappings = [cluster_mapping(m_over[h].argmax(axis=1), m_true, cfg.k, cfg.k_gt, source="mapping")
                for h in range(cfg.heads_per_type)]
    scores = _score_heads(t_norm, t_over, t_true, cfg.k_gt, mappings)
    if validation:
        v_norm, v_over = forward_heads(model, np.stack([s.image for s in validation]))
        select = _score_heads(v_norm, v_over, hard_labels(validation), cfg.k_gt, mappings)
    else:
        select = scores
    best = {t: int(max(select[t], key=lambda r: (r["macro_f1"], -r["head"]))["head"]) for t in scores}

    bo = best["overcluster"]
    clusters = t_over[bo].argmax(axis=1)
    paths = [s.path for s in target]
    if judgments is None:
        judgments = ProxyJudgments(t_true, cfg.k_gt)
    report = consistency_score(clusters, judgments.judge(paths, clusters, cfg.k))
    bn_pred = t_norm[best["normal"]].argmax(axis=1)
    bo_pred = mappings[bo](clusters)

    examples = {}
    for c in np.unique(clusters):
        examples[int(c)] = [paths[i] for i in np.flatnonzero(clusters == c)[:examples_per_cluster]]
    return {
        "split": target_name,
        "n": int(t_true.size),
        "heads": scores,
        "best": {
            "normal": {"head": best["normal"], **scores["normal"][best["normal"]],
                       "per_class_f1": _nan_to_none(per_class_f1(bn_pred, t_true, cfg.k_gt))},
            "overcluster": {"head": bo, **scores["overcluster"][bo],
                            "per_class_f1": _nan_to_none(per_class_f1(bo_pred, t_true, cfg.k_gt))},
        },
        "selected_on": "validation" if validation else target_name,
        "mapping": mappings[bo].as_dict(),
        "consistency": {"judgments": judgments.name, **report.as_dict()},
        "cluster_examples": examples,
    }


def _nan_to_none(a):
    return [None if np.isnan(x) else float(x) for x in a]
