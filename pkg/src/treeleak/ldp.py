"""Label randomization mechanisms (randomized response, prior-aware
randomized response, two-stage orchestration) and the post-hoc tree repair
that undoes label-noise damage on the label holder's side without touching
a single protocol message."""

import copy
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .trees import (RANDOM_FOREST, XGBOOST, Split, Tree, TreeModel,
                    UnsupportedModelError, grow_local_tree)


@dataclass
class NoisyLabels:
    """A noised label vector plus the audit trail of how it was produced."""

    original: np.ndarray
    noised: np.ndarray
    epsilon: float
    mechanism: str  # "rr" | "lp_1st" | "lp_2st"
    stage_assignment: np.ndarray = None  # 1 or 2 per row for the staged mechanism

    def __post_init__(self):
        self.original = np.asarray(self.original, dtype=np.int64)
        self.noised = np.asarray(self.noised, dtype=np.int64)


def rr_keep_probability(epsilon, class_count):
    """Probability that randomized response emits the true label."""
    e = math.exp(epsilon)
    return e / (e + class_count - 1)


def randomized_response(labels, epsilon, class_count, seed):
    """Keep each label with probability e^eps/(e^eps+|C|-1), else replace it
    uniformly among the other classes."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    keep = rng.random(len(labels)) < rr_keep_probability(epsilon, class_count)
    # a uniform draw over the other classes, expressed as a nonzero shift
    shift = rng.integers(1, class_count, size=len(labels))
    noised = np.where(keep, labels, (labels + shift) % class_count)
    return NoisyLabels(original=labels, noised=noised, epsilon=epsilon, mechanism="rr")


def rr_distribution(epsilon, class_count):
    """Closed-form output distribution of randomized response, rows by true
    label, columns by output."""
    e = math.exp(epsilon)
    m = np.full((class_count, class_count), 1.0 / (e + class_count - 1))
    np.fill_diagonal(m, e / (e + class_count - 1))
    return m


def _choose_top_k(prior, epsilon):
    """k* maximizing keep-probability times top-k prior mass; ties take the
    smallest k, and equal priors order by class id."""
    prior = np.asarray(prior, dtype=np.float64)
    if prior.min() < -1e-12 or abs(prior.sum() - 1.0) > 1e-6:
        raise ValueError("prior must be a probability distribution")
    order = np.argsort(-prior, kind="stable")
    cum = np.cumsum(prior[order])
    e = math.exp(epsilon)
    k_values = np.arange(1, len(prior) + 1)
    w = e / (e + k_values - 1) * cum
    k_star = int(np.argmax(w)) + 1
    return k_star, order[:k_star]


def rr_with_prior(label, prior, epsilon, rng):
    """Prior-aware randomized response for a single label.

    Restricts the response set to the k* most probable classes under the
    prior. A true label inside that set is kept with probability
    e^eps/(e^eps+k*-1); a true label outside it maps to a uniform draw over
    the set. Satisfies the same eps likelihood-ratio bound as plain RR.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    k_star, top = _choose_top_k(prior, epsilon)
    e = math.exp(epsilon)
    label = int(label)
    in_top = label in set(top.tolist())
    if in_top:
        if rng.random() < e / (e + k_star - 1):
            return label
        others = top[top != label]
        return int(others[rng.integers(0, len(others))]) if len(others) else label
    return int(top[rng.integers(0, k_star)])


def rr_with_prior_distribution(prior, epsilon):
    """Closed-form output distribution of rr_with_prior (rows: true label)."""
    k_star, top = _choose_top_k(prior, epsilon)
    e = math.exp(epsilon)
    c = len(prior)
    m = np.zeros((c, c), dtype=np.float64)
    top_set = set(top.tolist())
    for y in range(c):
        if y in top_set:
            for o in top:
                m[y, o] = e / (e + k_star - 1) if o == y else 1.0 / (e + k_star - 1)
        else:
            for o in top:
                m[y, o] = 1.0 / k_star
    return m


def default_interim_trainer(features, labels, class_count, seed,
                            tree_count=5, max_depth=6, feature_subsample=0.8):
    """Train the label holder's local forest used as a stage-2 prior source."""
    features = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    f = features.shape[1]
    take = max(1, math.ceil(feature_subsample * f))
    model = TreeModel(model_kind=RANDOM_FOREST, class_count=class_count,
                      max_depth=max_depth, tree_count=tree_count,
                      feature_subsample_ratio=feature_subsample)
    for t in range(tree_count):
        subset = np.sort(rng.choice(f, size=take, replace=False))
        tree = grow_local_tree(features, labels, class_count, max_depth,
                               feature_indices=subset)
        tree.tree_id = t
        tree.round_index = t
        model.trees.append(tree)
    return model.predict_scores


def lp_mst(features, labels, class_count, epsilon, stages=2, model_trainer=None,
           seed=0):
    """Multi-stage label randomization.

    Rows are shuffled and split evenly into stages. Stage 1 goes through
    plain randomized response; an interim model trained on the stage-1
    noisy rows then supplies a per-row prior, and stage 2 goes through
    rr_with_prior. Every row is noised exactly once, all under budget eps.

    Args:
        features: the label holder's own columns (prior model input); may be
            None when stages == 1.
        model_trainer: callback (features, noisy_labels, class_count, seed)
            -> predict_proba; defaults to a local depth-6 forest.
    """
    if stages not in (1, 2):
        raise ValueError("stages must be 1 or 2")
    labels = np.asarray(labels, dtype=np.int64)
    if stages == 1:
        out = randomized_response(labels, epsilon, class_count, seed)
        out.mechanism = "lp_1st"
        out.stage_assignment = np.ones(len(labels), dtype=np.int64)
        return out

    if features is None or np.asarray(features).ndim != 2 or np.asarray(features).shape[1] == 0:
        raise ValueError("two-stage noising needs features for the interim model")
    features = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = len(labels)
    perm = rng.permutation(n)
    stage1, stage2 = perm[: n // 2], perm[n // 2:]
    for ids, tag in ((stage1, "stage 1"), (stage2, "stage 2")):
        if len(np.unique(labels[ids])) < class_count:
            warnings.warn(f"{tag} rows are missing at least one class", stacklevel=2)

    sub_seed = int(rng.integers(0, 2 ** 63 - 1))
    stage1_noisy = randomized_response(labels[stage1], epsilon, class_count,
                                       sub_seed).noised
    trainer = model_trainer or default_interim_trainer
    predict_proba = trainer(features[stage1], stage1_noisy, class_count,
                            int(rng.integers(0, 2 ** 63 - 1)))
    priors = np.asarray(predict_proba(features[stage2]), dtype=np.float64)

    noised = np.empty(n, dtype=np.int64)
    noised[stage1] = stage1_noisy
    for pos, row in enumerate(stage2):
        noised[row] = rr_with_prior(labels[row], priors[pos], epsilon, rng)
    stage_assignment = np.empty(n, dtype=np.int64)
    stage_assignment[stage1] = 1
    stage_assignment[stage2] = 2
    return NoisyLabels(original=labels, noised=noised, epsilon=epsilon,
                       mechanism="lp_2st", stage_assignment=stage_assignment)


@dataclass
class GraftReport:
    """What the repair changed, keyed by the pre-repair node ids."""

    trees: list = field(default_factory=list)

    def add(self, tree_id, flagged, resplit, erased):
        self.trees.append({"tree_id": tree_id, "flagged_nodes": sorted(flagged),
                           "resplit_nodes": sorted(resplit),
                           "erased_descendants": erased})

    @property
    def flagged_total(self):
        return sum(len(t["flagged_nodes"]) for t in self.trees)

    @property
    def resplit_total(self):
        return sum(len(t["resplit_nodes"]) for t in self.trees)

    def to_json_dict(self):
        return {"trees": self.trees}


def _majority(labels, ids, class_count):
    counts = np.bincount(labels[ids], minlength=class_count)
    return int(np.argmax(counts))  # argmax takes the lowest class id on ties


def grafting(model, clean_labels, noisy_labels, active_feature_indices, features,
             percentile_limit=32):
    """Repair a forest trained on noisy labels using the clean ones.

    Walks each tree bottom-up. A node "checks contaminated" when its noisy
    majority class differs from its clean majority class. A leaf carries that
    flag directly. An internal node with a contaminated child either
    propagates the flag (if it checks contaminated itself) or erases its
    descendants and grows a fresh subtree over its instance space, on the
    clean labels, restricted to the label holder's own columns and the
    original global depth budget.

    The input model is left untouched (it keeps serving feature-party-facing
    routing); the repaired copy is for the label holder's own inference.

    Returns:
        (repaired TreeModel, GraftReport)
    """
    if model.model_kind != RANDOM_FOREST:
        raise UnsupportedModelError("repair applies to bagging ensembles only")
    clean_labels = np.asarray(clean_labels, dtype=np.int64)
    noisy_labels = np.asarray(noisy_labels, dtype=np.int64)
    features = np.asarray(features, dtype=np.float64)
    active_cols = np.asarray(active_feature_indices, dtype=np.int64)
    c = model.class_count

    repaired = copy.deepcopy(model)
    repaired.trees = []
    report = GraftReport()

    for tree in model.trees:
        contaminated, resplit_at = {}, set()

        def check(node):
            ids = node.instance_space
            return (_majority(noisy_labels, ids, c)
                    != _majority(clean_labels, ids, c))

        def analyze(node_id):
            node = tree.nodes[node_id]
            if node.is_leaf:
                contaminated[node_id] = check(node)
                return contaminated[node_id]
            left_c = analyze(node.children[0])
            right_c = analyze(node.children[1])
            if left_c or right_c:
                if check(node):
                    contaminated[node_id] = True
                    return True
                resplit_at.add(node_id)
            contaminated[node_id] = False
            return False

        analyze(0)

        new_tree = Tree(tree_id=tree.tree_id, feature_subset=tree.feature_subset,
                        round_index=tree.round_index, class_slot=tree.class_slot)
        erased = 0

        def subtree_size(node_id):
            node = tree.nodes[node_id]
            if node.is_leaf:
                return 1
            return 1 + subtree_size(node.children[0]) + subtree_size(node.children[1])

        def splice(sub, sub_id, id_map):
            sn = sub.nodes[sub_id]
            nn = new_tree.add_node(sn.depth, id_map[sn.instance_space])
            if sn.is_leaf:
                nn.leaf_weight = sn.leaf_weight.copy()
                return nn.node_id
            nn.split = Split(owner_party=1, feature_index=sn.split.feature_index,
                             threshold=sn.split.threshold)
            left = splice(sub, sn.children[0], id_map)
            right = splice(sub, sn.children[1], id_map)
            nn.children = (left, right)
            return nn.node_id

        def rebuild(node_id):
            nonlocal erased
            node = tree.nodes[node_id]
            if node_id in resplit_at:
                erased += subtree_size(node_id) - 1
                space = node.instance_space
                sub = grow_local_tree(features[space], clean_labels[space], c,
                                      model.max_depth,
                                      feature_indices=active_cols,
                                      percentile_limit=percentile_limit,
                                      root_depth=node.depth)
                return splice(sub, 0, space)
            nn = new_tree.add_node(node.depth, node.instance_space)
            nn.broadcast = node.broadcast
            if node.is_leaf:
                nn.leaf_weight = node.leaf_weight.copy()
                return nn.node_id
            nn.split = Split(node.split.owner_party, node.split.feature_index,
                             node.split.threshold)
            left = rebuild(node.children[0])
            right = rebuild(node.children[1])
            nn.children = (left, right)
            return nn.node_id

        rebuild(0)
        repaired.trees.append(new_tree)
        report.add(tree.tree_id,
                   [nid for nid, flag in contaminated.items() if flag],
                   resplit_at, erased)

    return repaired, report
