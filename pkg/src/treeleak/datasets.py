"""Tabular datasets, vertical feature partitions, and the small numeric
utilities the rest of the package builds on."""

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class MalformedInputError(ValueError):
    """A cell could not be parsed, or a required value is missing."""


class LabelCodingError(ValueError):
    """Labels cannot be recoded to dense 0-based class ids."""


class InvalidPartitionError(ValueError):
    """A requested vertical feature partition is inconsistent."""


@dataclass
class Dataset:
    """A dense labelled table.

    Attributes:
        features: float matrix of shape (n_samples, n_features).
        labels: int vector of dense 0-based class ids.
        class_count: number of classes (>= 2).
        feature_names: one name per column.
        row_ids: contiguous 0-based sample ids, re-issued after subsetting.
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    feature_names: list = field(default_factory=list)
    row_ids: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise MalformedInputError("features must be a 2-d matrix")
        if len(self.labels) != self.features.shape[0]:
            raise MalformedInputError("labels and features disagree on sample count")
        if not np.all(np.isfinite(self.features)):
            raise MalformedInputError("missing or non-finite feature cells are not permitted")
        if self.class_count < 2:
            raise LabelCodingError("a dataset needs at least two classes")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise LabelCodingError("labels must be dense 0-based ids below class_count")
        if not self.feature_names:
            self.feature_names = [f"f{j}" for j in range(self.features.shape[1])]
        if self.row_ids is None:
            self.row_ids = np.arange(self.features.shape[0], dtype=np.int64)

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, indices):
        """Return a new Dataset holding the given rows, with fresh row ids."""
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[indices],
            labels=self.labels[indices],
            class_count=self.class_count,
            feature_names=list(self.feature_names),
        )

    def class_histogram(self):
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass
class VerticalView:
    """One party's slice of the federated feature space.

    Feature indices refer to columns of the full table; only party 1
    (the active party) holds labels.
    """

    party_id: int
    feature_indices: np.ndarray
    has_labels: bool

    def __post_init__(self):
        self.feature_indices = np.asarray(sorted(self.feature_indices), dtype=np.int64)


@dataclass
class PartitionSpec:
    """How to split columns between the active party and the passive parties.

    mode "random_half" gives the passive party a random half of the columns,
    "top_k_percentile_to_attacker" gives it the top-k percent of columns
    ranked by feature/label mutual information, and "explicit" assigns the
    listed index sets to parties 1..M in order (party 1 active).
    """

    mode: str = "random_half"
    k_percent: float = None
    seed: int = 0
    explicit: list = None


def load_csv(path, label_column, class_count=None):
    """Load a CSV file with a header row into a Dataset.

    Labels may be arbitrary tokens and are recoded to dense 0-based ids in
    order of first appearance. Numeric label tokens with a fractional part
    are rejected, as are missing or non-numeric feature cells.

    Args:
        path: CSV file with a header naming every column.
        label_column: header name of the label column.
        class_count: optional expected class count; inferred when omitted.

    Returns:
        Dataset with the label column removed from the feature matrix.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedInputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise MalformedInputError(f"{path}: no column named '{label_column}'")
        label_pos = header.index(label_column)
        feature_names = [h for i, h in enumerate(header) if i != label_pos]

        rows, tokens = [], []
        for line_no, raw in enumerate(reader, start=2):
            if len(raw) != len(header):
                raise MalformedInputError(
                    f"{path}: row {line_no} has {len(raw)} cells, expected {len(header)}")
            vals = np.empty(len(header) - 1, dtype=np.float64)
            j = 0
            for i, cell in enumerate(raw):
                cell = cell.strip()
                if i == label_pos:
                    if not cell:
                        raise MalformedInputError(f"{path}: row {line_no} has an empty label")
                    tokens.append(cell)
                    continue
                if not cell:
                    raise MalformedInputError(
                        f"{path}: row {line_no}, column '{header[i]}' is empty")
                try:
                    vals[j] = float(cell)
                except ValueError:
                    raise MalformedInputError(
                        f"{path}: row {line_no}, column '{header[i]}': "
                        f"cannot parse '{cell}'") from None
                j += 1
            rows.append(vals)

    labels, coding = _recode_labels(tokens)
    if class_count is not None:
        if len(coding) > class_count:
            raise LabelCodingError(
                f"{path}: found {len(coding)} distinct labels, expected {class_count}")
    else:
        class_count = len(coding)
    if class_count < 2:
        raise LabelCodingError(f"{path}: fewer than two distinct labels")

    features = np.vstack(rows) if rows else np.empty((0, len(feature_names)))
    return Dataset(features=features, labels=labels, class_count=class_count,
                   feature_names=feature_names)


def _recode_labels(tokens):
    """Map label tokens to dense ids by first appearance; reject fractional numbers."""
    coding = {}
    out = np.empty(len(tokens), dtype=np.int64)
    for i, tok in enumerate(tokens):
        try:
            as_float = float(tok)
        except ValueError:
            as_float = None
        if as_float is not None and not float(as_float).is_integer():
            raise LabelCodingError(f"label '{tok}' is not an integer class id")
        if tok not in coding:
            coding[tok] = len(coding)
        out[i] = coding[tok]
    return out, coding


def train_test_split(dataset, test_fraction, seed):
    """Shuffle rows and split off a test set of ceil(n * test_fraction) rows.

    The split is unstratified; a warning is emitted if some class is absent
    from the training rows. Both returned datasets carry fresh row ids.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n = dataset.n_samples
    test_n = math.ceil(n * test_fraction)
    if test_n >= n:
        raise ValueError("split leaves no training rows")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(perm[:test_n])
    train_idx = np.sort(perm[test_n:])
    train, test = dataset.subset(train_idx), dataset.subset(test_idx)
    present = np.unique(train.labels)
    if len(present) < dataset.class_count:
        warnings.warn("training split is missing at least one class", stacklevel=2)
    return train, test


def make_partition(dataset, spec):
    """Assign columns to parties and return views, active party first.

    Returns:
        list of VerticalView, party 1 (labels) first, then passive parties.
        In the two-party modes the passive party 2 is the attacker.
    """
    f = dataset.n_features
    if spec.mode == "random_half":
        perm = np.random.default_rng(spec.seed).permutation(f)
        attacker = perm[: f // 2]
        active = perm[f // 2:]
        groups = [active, attacker]
    elif spec.mode == "top_k_percentile_to_attacker":
        if spec.k_percent is None or not 0.0 <= spec.k_percent <= 100.0:
            raise InvalidPartitionError("k_percent must lie in [0, 100]")
        mi = feature_label_mi(dataset)
        order = np.lexsort((np.arange(f), -mi))  # descending MI, ties by index
        take = math.ceil(f * spec.k_percent / 100.0)
        groups = [order[take:], order[:take]]
    elif spec.mode == "explicit":
        if not spec.explicit or len(spec.explicit) < 2:
            raise InvalidPartitionError("explicit mode needs at least two index sets")
        groups = [np.asarray(g, dtype=np.int64) for g in spec.explicit]
        flat = np.concatenate(groups) if groups else np.empty(0, dtype=np.int64)
        if len(flat) != len(set(flat.tolist())):
            raise InvalidPartitionError("explicit feature sets overlap")
        if set(flat.tolist()) != set(range(f)):
            raise InvalidPartitionError("explicit feature sets must cover every column exactly once")
    else:
        raise InvalidPartitionError(f"unknown partition mode '{spec.mode}'")

    views = []
    for k, g in enumerate(groups):
        views.append(VerticalView(party_id=k + 1, feature_indices=g, has_labels=(k == 0)))
    return views


def feature_label_mi(dataset, bins=10):
    """Histogram mutual information between each feature and the label.

    Each column is bucketed into `bins` equal-width bins over its own range
    (constant columns score 0) and MI is computed from the bin/label
    contingency table in nats. Only the relative ordering of columns is
    meaningful at these bin counts.
    """
    n = dataset.n_samples
    c = dataset.class_count
    label_p = dataset.class_histogram() / max(n, 1)
    out = np.zeros(dataset.n_features, dtype=np.float64)
    for j in range(dataset.n_features):
        col = dataset.features[:, j]
        lo, hi = col.min(), col.max()
        if hi == lo:
            continue
        idx = np.minimum(((col - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
        table = np.zeros((bins, c), dtype=np.float64)
        np.add.at(table, (idx, dataset.labels), 1.0)
        table /= n
        bin_p = table.sum(axis=1)
        mi = 0.0
        for b in range(bins):
            if bin_p[b] == 0.0:
                continue
            for y in range(c):
                p = table[b, y]
                if p > 0.0:
                    mi += p * math.log(p / (bin_p[b] * label_p[y]))
        out[j] = mi
    return out


def minmax_normalize(matrix):
    """Scale each column to [0, 1]; constant columns become all zeros."""
    m = np.asarray(matrix, dtype=np.float64)
    lo = m.min(axis=0, keepdims=True)
    hi = m.max(axis=0, keepdims=True)
    span = hi - lo
    out = np.zeros_like(m)
    nz = (span != 0.0).ravel()
    out[:, nz] = (m[:, nz] - lo[:, nz]) / span[:, nz]
    return out


def gen_synthetic(n, f, c, cluster_spread, seed):
    """Gaussian class blobs: one random center per class, isotropic spread.

    With cluster_spread 0 every sample sits exactly on its class center, so
    the classes are trivially separable. Labels cycle 0..c-1 over rows.
    """
    if c < 2:
        raise LabelCodingError("need at least two classes")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 3.0, size=(c, f))
    labels = np.arange(n, dtype=np.int64) % c
    noise = rng.normal(0.0, 1.0, size=(n, f)) * float(cluster_spread)
    return Dataset(features=centers[labels] + noise, labels=labels, class_count=c)


def gen_synthetic_tree(n, f, c, depth, seed, flip_fraction=0.0):
    """Standard-normal features; labels carved by a hidden random threshold
    tree of the given depth, leaf classes cycling 0..c-1.

    Unlike the blob generator the classes here are unions of axis-aligned
    boxes, so unsupervised clustering on a feature subset recovers little,
    while a supervised tree model can. flip_fraction relabels that share of
    rows uniformly at random to keep regions impure.
    """
    if c < 2:
        raise LabelCodingError("need at least two classes")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.0, size=(n, f))
    # walk every row down one random tree; node key = path prefix per level
    region = np.zeros(n, dtype=np.int64)
    for level in range(depth):
        child = np.zeros(n, dtype=np.int64)
        for node in range(2 ** level):
            rows = np.flatnonzero(region == node)
            j = int(rng.integers(0, f))
            s = rng.normal(0.0, 1.0)
            child[rows] = 2 * node
            child[rows[x[rows, j] >= s]] += 1
        region = child
    labels = region % c
    if flip_fraction > 0.0:
        k = int(round(flip_fraction * n))
        hit = rng.choice(n, size=k, replace=False)
        labels[hit] = rng.integers(0, c, size=k)
    return Dataset(features=x, labels=labels, class_count=c)
