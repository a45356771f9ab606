"""Clustering agreement and ranking metrics, plus over-seed aggregation."""

from dataclasses import dataclass

import numpy as np
from scipy import stats


class UndefinedAUCError(ValueError):
    pass


@dataclass
class ContingencyTable:
    """Joint counts of (true class, predicted cluster)."""

    counts: np.ndarray

    @classmethod
    def from_labels(cls, truth, pred):
        truth = np.asarray(truth, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if truth.shape != pred.shape or truth.ndim != 1:
            raise ValueError("truth and pred must be equal-length vectors")
        if len(truth) == 0:
            raise ValueError("need at least one sample")
        n_classes = int(truth.max()) + 1
        n_clusters = int(pred.max()) + 1
        counts = np.zeros((n_classes, n_clusters), dtype=np.int64)
        np.add.at(counts, (truth, pred), 1)
        return cls(counts=counts)

    @property
    def n(self):
        return int(self.counts.sum())

    @property
    def class_marginals(self):
        return self.counts.sum(axis=1)

    @property
    def cluster_marginals(self):
        return self.counts.sum(axis=0)


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def _conditional_entropy(counts, n):
    """H(rows | columns): natural log, empty cells contribute zero."""
    col = counts.sum(axis=0)
    total = 0.0
    for j in np.flatnonzero(col):
        p_cell = counts[:, j][counts[:, j] > 0] / n
        total -= float((p_cell * np.log(counts[:, j][counts[:, j] > 0] / col[j])).sum())
    return total


def v_measure(truth, pred, beta=1.0):
    """Harmonic mean of homogeneity and completeness.

    h = 1 - H(C|K)/H(C) and c = 1 - H(K|C)/H(K), with the degenerate
    conventions H(C)=0 => h=1, H(K)=0 => c=1, and h+c=0 => 0.
    """
    table = ContingencyTable.from_labels(truth, pred)
    n = table.n
    h_c = _entropy(table.class_marginals, n)
    h_k = _entropy(table.cluster_marginals, n)
    h = 1.0 if h_c == 0 else 1.0 - _conditional_entropy(table.counts, n) / h_c
    c = 1.0 if h_k == 0 else 1.0 - _conditional_entropy(table.counts.T, n) / h_k
    if h + c == 0:
        return 0.0
    return (1.0 + beta) * h * c / (beta * h + c)


def _binary_auc(positive, scores):
    ranks = stats.rankdata(scores, method="average")
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("need at least one positive and one negative")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def auc(truth, scores):
    """Rank-based AUC with midrank ties.

    A one-column score vector is treated as the score of class 1. A score
    matrix is reduced one-vs-rest per class and macro-averaged without
    weighting; classes missing a positive or a negative are skipped, and no
    usable class at all is an error.
    """
    truth = np.asarray(truth, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        return _binary_auc(truth == 1, scores)
    per_class = []
    for c in range(scores.shape[1]):
        positive = truth == c
        if positive.any() and not positive.all():
            per_class.append(_binary_auc(positive, scores[:, c]))
    if not per_class:
        raise UndefinedAUCError("every class is degenerate in truth")
    return float(np.mean(per_class))


def mean_std(values):
    """Mean and sample standard deviation (one value gives std 0)."""
    arr = np.asarray(list(values), dtype=np.float64)
    if len(arr) == 0:
        raise ValueError("nothing to aggregate")
    m = float(arr.mean())
    s = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return m, s


def format_mean_std(values, digits=3):
    m, s = mean_std(values)
    return f"{m:.{digits}f} (±{s:.{digits}f})"


def aggregate(rows, group_keys, metric_keys):
    """Group result rows and summarize each metric as mean/std/pretty text.

    Args:
        rows: dicts holding both the grouping fields and numeric metrics.
        group_keys: field names identifying a group (seed excluded).
        metric_keys: numeric fields to summarize; missing/None values are
            dropped per group.

    Returns:
        list of dicts: the group fields, n_seeds, and per metric
        "<key>_mean", "<key>_std", "<key>_fmt".
    """
    groups = {}
    order = []
    for row in rows:
        key = tuple(row.get(k) for k in group_keys)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row)
    out = []
    for key in order:
        bunch = groups[key]
        summary = dict(zip(group_keys, key))
        summary["n_seeds"] = len(bunch)
        for mk in metric_keys:
            vals = [r[mk] for r in bunch if r.get(mk) is not None]
            if not vals:
                continue
            m, s = mean_std(vals)
            summary[f"{mk}_mean"] = m
            summary[f"{mk}_std"] = s
            summary[f"{mk}_fmt"] = f"{m:.3f} (±{s:.3f})"
        out.append(summary)
    return out
