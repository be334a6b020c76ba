"""Cosine-distance retrieval and MAP / AUC scoring.

Protocol: every shape of the evaluated split queries all the other shapes,
ranked by ascending cosine distance with ties broken by ascending shape id.
A gallery item is relevant when it shares the query's class.

* AP = mean over the relevant items of the precision at their rank.
* AUC = trapezoidal area under the 11-point interpolated precision-recall
  curve (recall 0, 0.1, ..., 1; interpolated precision is the best precision
  at any recall >= r).
* MAP and AUC average over queries that have at least one relevant item;
  the rest are counted in ``excluded``.
"""

import csv
import io
from fractions import Fraction
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import DimensionError, DomainError

RECALL_LEVELS = np.linspace(0.0, 1.0, 11)


@dataclass
class FeatureSet:
    features: np.ndarray  # (n, D)
    labels: np.ndarray
    shape_ids: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.shape_ids = np.asarray(self.shape_ids)
        if self.features.ndim != 2 or not (len(self.features) == len(self.labels) == len(self.shape_ids)):
            raise DimensionError("features, labels and shape_ids must describe the same n shapes")


@dataclass
class MetricsReport:
    map: float
    auc: float
    ap: np.ndarray  # per query, NaN for excluded queries
    auc_per_query: np.ndarray
    query_ids: np.ndarray
    query_labels: np.ndarray
    pr_curve: np.ndarray  # (11, 2): recall level, mean interpolated precision
    excluded: int = 0
    per_class_ap: dict = field(default_factory=dict)

    def summary(self):
        return f"MAP={self.map:.6f} AUC={self.auc:.6f}"

    def per_query_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_id", "class", "ap"])
        for qid, c, ap in zip(self.query_ids, self.query_labels, self.ap):
            w.writerow([int(qid), int(c), "" if np.isnan(ap) else repr(float(ap))])
        return buf.getvalue()

    def summary_csv(self):
        return f"MAP,AUC,excluded_queries\n{self.map!r},{self.auc!r},{self.excluded}\n"

    def pr_csv(self):
        lines = ["recall,precision"]
        lines += [f"{r!r},{p!r}" for r, p in self.pr_curve]
        return "\n".join(lines) + "\n"


def cosine_distance(a, b):
    """``1 - cos(a, b)``; 1 when either vector is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"vectors differ in shape: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(np.clip(1.0 - (a @ b) / (na * nb), 0.0, 2.0))


def distance_matrix(features):
    """Pairwise cosine distances; rows or columns of zero vectors get distance 1."""
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = f / safe[:, None]
    d = 1.0 - unit @ unit.T
    zero = norms == 0
    d[zero, :] = 1.0
    d[:, zero] = 1.0
    return np.clip(d, 0.0, 2.0)


def average_precision(relevant):
    """AP of a ranked 0/1 relevance list (rank 1 first); NaN when nothing is relevant.

    Computed as an exact rational and rounded once, so the value does not
    depend on summation order and matches hand-computed fractions.
    """
    rel = np.asarray(relevant, dtype=bool)
    r = rel.sum()
    if r == 0:
        return float("nan")
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    total = sum(Fraction(int(h), int(k)) for h, k in zip(hits[rel], ranks[rel]))
    return float(total / int(r))


def interpolated_pr(relevant):
    """Interpolated precision at the 11 standard recall levels."""
    rel = np.asarray(relevant, dtype=bool)
    r = rel.sum()
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    precision = hits / ranks
    recall = hits / r
    # best precision at recall >= level
    best = np.maximum.accumulate(precision[::-1])[::-1]
    out = np.zeros(len(RECALL_LEVELS))
    for k, level in enumerate(RECALL_LEVELS):
        idx = np.searchsorted(recall, level - 1e-12, side="left")
        out[k] = best[idx] if idx < len(rel) else 0.0
    return out


def pr_auc(interp):
    return float(np.sum((interp[1:] + interp[:-1]) * 0.5 * np.diff(RECALL_LEVELS)))


def rank_gallery(dist_row, shape_ids, query):
    """Gallery order for one query: ascending distance, then ascending shape id."""
    mask = np.arange(len(shape_ids)) != query
    idx = np.nonzero(mask)[0]
    order = np.lexsort((shape_ids[idx], dist_row[idx]))
    return idx[order]


def rank_and_score(fs):
    """Leave-one-out retrieval over ``fs``; returns a MetricsReport."""
    n = len(fs.labels)
    if n < 2:
        raise DomainError("retrieval needs at least two shapes")
    dist = distance_matrix(fs.features)
    aps = np.full(n, np.nan)
    aucs = np.full(n, np.nan)
    curves = []
    for q in range(n):
        ranked = rank_gallery(dist[q], fs.shape_ids, q)
        rel = fs.labels[ranked] == fs.labels[q]
        if not rel.any():
            continue
        aps[q] = average_precision(rel)
        interp = interpolated_pr(rel)
        curves.append(interp)
        aucs[q] = pr_auc(interp)
    valid = ~np.isnan(aps)
    excluded = int(n - valid.sum())
    if not valid.any():
        raise DomainError("no query has a relevant gallery item")
    per_class = {int(c): float(np.mean(aps[valid & (fs.labels == c)])) for c in np.unique(fs.labels[valid])}
    pr = np.column_stack([RECALL_LEVELS, np.mean(curves, axis=0)])
    return MetricsReport(
        map=float(np.mean(aps[valid])),
        auc=float(np.mean(aucs[valid])),
        ap=aps,
        auc_per_query=aucs,
        query_ids=fs.shape_ids.copy(),
        query_labels=fs.labels.copy(),
        pr_curve=pr,
        excluded=excluded,
        per_class_ap=per_class,
    )


def extract_features(net, dataset, split="test", batch_size=32):
    """Penultimate-layer shape features for one split of a dataset."""
    views, labels, ids = dataset.split(split)
    if len(labels) == 0:
        raise DomainError(f"split {split!r} is empty")
    spec = net.spec
    if spec.architecture != "view_cnn" and views.shape[1] != spec.views:
        raise DomainError(f"{spec.architecture} expects {spec.views} views, dataset has {views.shape[1]}")
    return FeatureSet(net.embed(views, batch_size), labels, ids)


def evaluate(net, dataset, split="test"):
    return rank_and_score(extract_features(net, dataset, split))
