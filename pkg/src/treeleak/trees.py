"""Tree structures and split-scoring math shared by the federated trainer,
the grafting repair, and the standalone attack workflow."""

import json
import math
from dataclasses import dataclass, field

import numpy as np

RANDOM_FOREST = "random_forest"
XGBOOST = "xgboost"


class InvalidSplitError(ValueError):
    """A split with an empty child or a degenerate denominator was scored."""


class RoutingError(ValueError):
    """A row is missing a feature the model needs for routing."""


class UnsupportedModelError(ValueError):
    """An operation was asked to handle a model kind it does not support."""


@dataclass
class BoosterParams:
    """Gradient-boosting hyper parameters; RF ignores everything but nothing."""

    learning_rate: float = 0.3
    lambda_reg: float = 1.0
    gamma_reg: float = 0.0

    def __post_init__(self):
        if self.lambda_reg < 0 or self.gamma_reg < 0:
            raise ValueError("regularizers must be non-negative")


@dataclass
class SplitStatistics:
    """Counts and gradient sums describing one candidate split of a node.

    Class-count vectors drive the Gini score and leaf distributions; the
    scalar gradient/hessian sums drive the boosting gain. Either group may
    be left at None when the other model kind is in play.
    """

    n: int
    n_left: int
    n_right: int
    class_counts: np.ndarray = None
    left_class_counts: np.ndarray = None
    right_class_counts: np.ndarray = None
    grad_sum: float = 0.0
    hess_sum: float = 0.0
    left_grad_sum: float = 0.0
    left_hess_sum: float = 0.0
    right_grad_sum: float = 0.0
    right_hess_sum: float = 0.0


def gini_gain(stats):
    """Weighted child purity minus parent purity.

    Returns
    -------
    float: (n_L/n) * sum_c (n_L_c/n_L)^2 + (n_R/n) * sum_c (n_R_c/n_R)^2
           - sum_c (n_c/n)^2
    """
    if stats.n_left < 1 or stats.n_right < 1:
        raise InvalidSplitError("both children must be nonempty")
    if stats.n != stats.n_left + stats.n_right:
        raise InvalidSplitError("child sizes do not add up to the parent")

    def purity(counts, total):
        frac = np.asarray(counts, dtype=np.float64) / total
        return float(np.dot(frac, frac))

    return (
        stats.n_left / stats.n * purity(stats.left_class_counts, stats.n_left)
        + stats.n_right / stats.n * purity(stats.right_class_counts, stats.n_right)
        - purity(stats.class_counts, stats.n)
    )


def xgb_gain(stats, params):
    """Second-order boosting gain: 0.5 * [gL^2/(hL+l) + gR^2/(hR+l) - g^2/(h+l)] - gamma."""
    lam = params.lambda_reg
    dl, dr, dp = stats.left_hess_sum + lam, stats.right_hess_sum + lam, stats.hess_sum + lam
    if dl <= 0 or dr <= 0 or dp <= 0:
        raise InvalidSplitError("hessian sums plus lambda must be positive")
    return 0.5 * (
        stats.left_grad_sum ** 2 / dl
        + stats.right_grad_sum ** 2 / dr
        - stats.grad_sum ** 2 / dp
    ) - params.gamma_reg


def grad_hess(labels, scores):
    """Per-sample per-class gradient and hessian of softmax cross-entropy.

    g = p - 1[y == c], h = p * (1 - p), with p the row-wise softmax of the
    current margins. The two-class case reduces to the sigmoid formulas when
    one margin column is held at zero.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("margins must be finite")
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    g = p.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    h = p * (1.0 - p)
    return g, h


def leaf_weight(stats, params, kind, class_count=None, class_slot=None):
    """Per-class leaf value: RF -> class frequencies, XGB -> -g/(h+lambda).

    For a boosting tree the weight is a margin on a single class slot; the
    returned vector is zero elsewhere so ensembles of either kind accumulate
    uniformly.
    """
    if kind == RANDOM_FOREST:
        counts = np.asarray(stats.class_counts, dtype=np.float64)
        return counts / counts.sum()
    if kind == XGBOOST:
        w = -stats.grad_sum / (stats.hess_sum + params.lambda_reg)
        if class_slot is None:
            return np.asarray([w], dtype=np.float64)
        out = np.zeros(class_count, dtype=np.float64)
        out[class_slot] = w
        return out
    raise UnsupportedModelError(f"unknown model kind '{kind}'")


@dataclass
class Split:
    owner_party: int
    feature_index: int  # column in the full federated table
    threshold: float


@dataclass
class TreeNode:
    node_id: int
    depth: int
    instance_space: np.ndarray
    split: Split = None
    children: tuple = None
    leaf_weight: np.ndarray = None
    broadcast: bool = False  # whether this node's space went out to passive parties

    @property
    def is_leaf(self):
        return self.children is None


@dataclass
class Tree:
    """A node arena with the root at index 0."""

    tree_id: int
    nodes: list = field(default_factory=list)
    feature_subset: np.ndarray = None
    round_index: int = 0
    class_slot: int = None  # None for forests, class index for boosting trees

    @property
    def root(self):
        return self.nodes[0]

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]

    def add_node(self, depth, instance_space):
        node = TreeNode(node_id=len(self.nodes), depth=depth,
                        instance_space=np.asarray(instance_space, dtype=np.int64))
        self.nodes.append(node)
        return node


@dataclass
class TreeModel:
    """An ordered ensemble plus the hyper parameters that shaped it."""

    model_kind: str
    class_count: int
    max_depth: int
    tree_count: int
    feature_subsample_ratio: float
    booster: BoosterParams = field(default_factory=BoosterParams)
    trees: list = field(default_factory=list)

    def predict_scores(self, X):
        """Per-class scores for each row of X.

        RF averages leaf class distributions; XGB sums learning-rate-scaled
        leaf margins and applies a softmax. An empty ensemble scores uniform.
        """
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        acc = np.zeros((n, self.class_count), dtype=np.float64)
        if not self.trees:
            return np.full((n, self.class_count), 1.0 / self.class_count)
        for tree in self.trees:
            acc += _route_scores(tree, X, self.class_count)
        if self.model_kind == RANDOM_FOREST:
            return acc / len(self.trees)
        margins = self.booster.learning_rate * acc
        shifted = margins - margins.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.predict_scores(X), axis=1)

    def to_json_dict(self):
        return {
            "model_kind": self.model_kind,
            "class_count": self.class_count,
            "max_depth": self.max_depth,
            "tree_count": self.tree_count,
            "feature_subsample_ratio": self.feature_subsample_ratio,
            "booster": {
                "learning_rate": self.booster.learning_rate,
                "lambda_reg": self.booster.lambda_reg,
                "gamma_reg": self.booster.gamma_reg,
            },
            "trees": [_tree_to_dict(t) for t in self.trees],
        }

    def to_json(self):
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json_dict(cls, d):
        booster = BoosterParams(**d["booster"])
        model = cls(
            model_kind=d["model_kind"],
            class_count=d["class_count"],
            max_depth=d["max_depth"],
            tree_count=d["tree_count"],
            feature_subsample_ratio=d["feature_subsample_ratio"],
            booster=booster,
        )
        model.trees = [_tree_from_dict(t) for t in d["trees"]]
        return model

    @classmethod
    def from_json(cls, text):
        return cls.from_json_dict(json.loads(text))


def predict(model, row):
    """Score a single row; convenience wrapper over TreeModel.predict_scores."""
    return model.predict_scores(np.asarray(row, dtype=np.float64).reshape(1, -1))[0]


def _route_scores(tree, X, class_count):
    out = np.zeros((X.shape[0], class_count), dtype=np.float64)
    stack = [(0, np.arange(X.shape[0]))]
    while stack:
        node_id, idx = stack.pop()
        if len(idx) == 0:
            continue
        node = tree.nodes[node_id]
        if node.is_leaf:
            out[idx] = node.leaf_weight
            continue
        col = X[idx, node.split.feature_index]
        if np.isnan(col).any():
            raise RoutingError(
                f"row is missing feature {node.split.feature_index} needed for routing")
        mask = col < node.split.threshold
        stack.append((node.children[0], idx[mask]))
        stack.append((node.children[1], idx[~mask]))
    return out


def _tree_to_dict(tree):
    return {
        "tree_id": tree.tree_id,
        "round_index": tree.round_index,
        "class_slot": tree.class_slot,
        "feature_subset": np.asarray(tree.feature_subset).tolist(),
        "nodes": [
            {
                "node_id": n.node_id,
                "depth": n.depth,
                "instance_space": n.instance_space.tolist(),
                "broadcast": n.broadcast,
                "split": None if n.split is None else {
                    "owner_party": n.split.owner_party,
                    "feature_index": n.split.feature_index,
                    "threshold": n.split.threshold,
                },
                "children": None if n.children is None else list(n.children),
                "leaf_weight": None if n.leaf_weight is None else n.leaf_weight.tolist(),
            }
            for n in tree.nodes
        ],
    }


def _tree_from_dict(d):
    tree = Tree(tree_id=d["tree_id"], round_index=d["round_index"],
                class_slot=d["class_slot"],
                feature_subset=np.asarray(d["feature_subset"], dtype=np.int64))
    for nd in d["nodes"]:
        node = TreeNode(
            node_id=nd["node_id"],
            depth=nd["depth"],
            instance_space=np.asarray(nd["instance_space"], dtype=np.int64),
            broadcast=nd["broadcast"],
        )
        if nd["split"] is not None:
            node.split = Split(**nd["split"])
        if nd["children"] is not None:
            node.children = tuple(nd["children"])
        if nd["leaf_weight"] is not None:
            node.leaf_weight = np.asarray(nd["leaf_weight"], dtype=np.float64)
        tree.nodes.append(node)
    return tree


def percentile_thresholds(values, limit):
    """Candidate thresholds for one feature restricted to a node.

    Uses at most min(limit, distinct - 1) evenly spaced percentiles of the
    raw value multiset (linear interpolation between order statistics), so a
    single candidate is the median. Duplicates collapse; constant features
    yield nothing.
    """
    values = np.asarray(values, dtype=np.float64)
    distinct = np.unique(values)
    l = min(int(limit), len(distinct) - 1)
    if l < 1:
        return np.empty(0, dtype=np.float64)
    qs = 100.0 * np.arange(1, l + 1) / (l + 1)
    return np.unique(np.percentile(values, qs, method="linear"))


def grow_local_tree(X, y, class_count, max_depth, rng=None, feature_indices=None,
                    percentile_limit=32, min_samples_split=2, root_depth=0):
    """Grow one Gini tree on locally held columns; used by the interim
    label-prior model and by post-hoc subtree repairs.

    Args:
        X: full-width feature matrix (rows already restricted to the node).
        y: labels aligned with X.
        feature_indices: usable columns of X (default: all).
        root_depth: depth of this tree's root inside an enclosing tree, so a
            repair keeps the enclosing model's global depth budget.

    Returns:
        Tree whose instance spaces index rows of X and whose splits are owned
        by party 1.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if feature_indices is None:
        feature_indices = np.arange(X.shape[1], dtype=np.int64)
    feature_indices = np.asarray(feature_indices, dtype=np.int64)
    tree = Tree(tree_id=0, feature_subset=feature_indices)
    params = BoosterParams()

    def leaf(node, ids):
        counts = np.bincount(y[ids], minlength=class_count)
        node.leaf_weight = counts.astype(np.float64) / max(len(ids), 1)

    def build(ids, depth):
        node = tree.add_node(depth, ids)
        labels_here = y[ids]
        if depth >= max_depth:
            leaf(node, ids)
            return node.node_id
        if len(ids) < min_samples_split or len(np.unique(labels_here)) <= 1:
            leaf(node, ids)
            return node.node_id
        best = None
        counts = np.bincount(labels_here, minlength=class_count)
        onehot = np.zeros((len(ids), class_count), dtype=np.float64)
        onehot[np.arange(len(ids)), labels_here] = 1.0
        for f in feature_indices:
            vals = X[ids, f]
            for s in percentile_thresholds(vals, percentile_limit):
                mask = vals < s
                nl = int(mask.sum())
                if nl == 0 or nl == len(ids):
                    continue
                lc = onehot[mask].sum(axis=0)
                stats = SplitStatistics(
                    n=len(ids), n_left=nl, n_right=len(ids) - nl,
                    class_counts=counts, left_class_counts=lc,
                    right_class_counts=counts - lc)
                gain = gini_gain(stats)
                key = (-gain, int(f), float(s))
                if best is None or key < best[0]:
                    best = (key, f, s, mask)
        if best is None:
            leaf(node, ids)
            return node.node_id
        _, f, s, mask = best
        node.split = Split(owner_party=1, feature_index=int(f), threshold=float(s))
        left = build(ids[mask], depth + 1)
        right = build(ids[~mask], depth + 1)
        node.children = (left, right)
        return node.node_id

    build(np.arange(X.shape[0], dtype=np.int64), root_depth)
    return tree
