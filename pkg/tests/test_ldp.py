import math

import numpy as np
import pytest

from treeleak.ldp import (GraftReport, NoisyLabels, grafting, lp_mst,
                          randomized_response, rr_distribution,
                          rr_keep_probability, rr_with_prior,
                          rr_with_prior_distribution)
from treeleak.trees import (RANDOM_FOREST, XGBOOST, Split, Tree, TreeModel,
                            UnsupportedModelError)


def test_keep_probability_closed_form():
    e = math.exp(1.0)
    assert rr_keep_probability(1.0, 2) == pytest.approx(e / (e + 1))
    assert rr_keep_probability(1.0, 10) == pytest.approx(e / (e + 9))
    # more classes leave less mass on the truth
    assert rr_keep_probability(1.0, 10) < rr_keep_probability(1.0, 2)


def test_randomized_response_keep_rate_monte_carlo():
    labels = np.zeros(50_000, dtype=np.int64)
    for c in (2, 10):
        out = randomized_response(labels, 1.0, c, seed=3)
        rate = float((out.noised == labels).mean())
        assert rate == pytest.approx(rr_keep_probability(1.0, c), abs=0.01)
        assert out.noised.min() >= 0 and out.noised.max() < c
        assert out.mechanism == "rr"


def test_randomized_response_rejects_nonpositive_epsilon():
    with pytest.raises(ValueError):
        randomized_response(np.array([0, 1]), 0.0, 2, seed=0)


def test_rr_distribution_rows_are_distributions():
    m = rr_distribution(0.7, 4)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    assert np.all(np.diag(m) == rr_keep_probability(0.7, 4))
    off = m[~np.eye(4, dtype=bool)]
    np.testing.assert_allclose(off, off[0])


def test_prior_response_uniform_prior_reduces_to_plain_rr():
    for c in (2, 10):
        prior = np.full(c, 1.0 / c)
        with_prior = rr_with_prior_distribution(prior, 1.0)
        plain = rr_distribution(1.0, c)
        tv = 0.5 * np.abs(with_prior - plain).sum(axis=1).max()
        assert tv <= 1e-12


def test_prior_response_perfect_prior_keeps_the_label():
    rng = np.random.default_rng(0)
    for label in range(5):
        prior = np.zeros(5)
        prior[label] = 1.0
        for _ in range(20):
            assert rr_with_prior(label, prior, 1.0, rng) == label


def test_prior_response_beats_plain_rr_with_a_perfect_prior():
    # 10 classes, eps=1: plain RR keeps ~0.232 of labels, a perfect prior
    # collapses the response set to the true class
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 10, size=10_000)
    eye = np.eye(10)
    staged = np.array([rr_with_prior(y, eye[y], 1.0, rng) for y in labels])
    plain = randomized_response(labels, 1.0, 10, seed=2).noised
    assert (staged == labels).mean() > (plain == labels).mean()
    assert (staged == labels).mean() == 1.0


def test_prior_response_output_stays_in_top_set():
    rng = np.random.default_rng(4)
    prior = np.array([0.5, 0.4, 0.05, 0.05])
    draws = {rr_with_prior(3, prior, 0.5, rng) for _ in range(200)}
    # true label 3 sits outside the restricted set, responses never leak it
    assert 3 not in draws


def test_prior_response_rejects_bad_prior():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        rr_with_prior(0, np.array([0.7, 0.7]), 1.0, rng)


def test_lp_mst_single_stage_is_plain_rr():
    labels = np.tile(np.arange(3), 40)
    out = lp_mst(None, labels, 3, epsilon=1.0, stages=1, seed=9)
    plain = randomized_response(labels, 1.0, 3, seed=9)
    np.testing.assert_array_equal(out.noised, plain.noised)
    assert out.mechanism == "lp_1st"
    assert np.all(out.stage_assignment == 1)


def test_lp_mst_two_stage_shape_and_determinism():
    rng = np.random.default_rng(8)
    n = 200
    features = rng.normal(0, 1, size=(n, 4))
    labels = (features[:, 0] > 0).astype(np.int64)
    a = lp_mst(features, labels, 2, epsilon=1.0, stages=2, seed=5)
    b = lp_mst(features, labels, 2, epsilon=1.0, stages=2, seed=5)
    np.testing.assert_array_equal(a.noised, b.noised)
    assert a.mechanism == "lp_2st"
    assert int((a.stage_assignment == 1).sum()) == n // 2
    assert a.noised.min() >= 0 and a.noised.max() < 2
    c = lp_mst(features, labels, 2, epsilon=1.0, stages=2, seed=6)
    assert not np.array_equal(a.noised, c.noised)


def test_lp_mst_two_stage_needs_features():
    with pytest.raises(ValueError):
        lp_mst(None, np.array([0, 1]), 2, epsilon=1.0, stages=2)
    with pytest.raises(ValueError):
        lp_mst(np.zeros((2, 0)), np.array([0, 1]), 2, epsilon=1.0, stages=2)


def _leaf_weights(labels, ids, c):
    counts = np.bincount(labels[ids], minlength=c).astype(np.float64)
    return counts / counts.sum()


def _depth_two_model(noisy, c):
    """x = row index 0..19; root splits at 10, children at 5 and 15."""
    tree = Tree(tree_id=0, feature_subset=np.array([0]))
    root = tree.add_node(0, np.arange(20))
    left = tree.add_node(1, np.arange(10))
    right = tree.add_node(1, np.arange(10, 20))
    ll = tree.add_node(2, np.arange(5))
    lr = tree.add_node(2, np.arange(5, 10))
    rl = tree.add_node(2, np.arange(10, 15))
    rr = tree.add_node(2, np.arange(15, 20))
    root.split = Split(owner_party=2, feature_index=0, threshold=10.0)
    root.children = (left.node_id, right.node_id)
    left.split = Split(owner_party=1, feature_index=0, threshold=5.0)
    left.children = (ll.node_id, lr.node_id)
    right.split = Split(owner_party=2, feature_index=0, threshold=15.0)
    right.children = (rl.node_id, rr.node_id)
    for leaf in (ll, lr, rl, rr):
        leaf.leaf_weight = _leaf_weights(noisy, leaf.instance_space, c)
    return TreeModel(model_kind=RANDOM_FOREST, class_count=c, max_depth=3,
                     tree_count=1, feature_subsample_ratio=1.0, trees=[tree]), \
        {"root": root.node_id, "left": left.node_id, "lr": lr.node_id,
         "right": right.node_id}


def test_grafting_resplits_the_lowest_clean_ancestor():
    clean = np.array([0] * 10 + [1] * 5 + [2] * 5)
    noisy = clean.copy()
    noisy[[5, 6, 7]] = 1  # leaf {5..9} majority flips 0 -> 1
    features = np.arange(20, dtype=np.float64).reshape(-1, 1)
    model, ids = _depth_two_model(noisy, 3)
    before = model.to_json()

    repaired, report = grafting(model, clean, noisy,
                                active_feature_indices=[0],
                                features=features)
    # the pre-repair model is untouched
    assert model.to_json() == before
    t = report.trees[0]
    assert t["flagged_nodes"] == [ids["lr"]]
    assert t["resplit_nodes"] == [ids["left"]]
    assert report.flagged_total == 1 and report.resplit_total == 1
    # right subtree survives verbatim: a node still splits at 15
    thresholds = {n.split.threshold for n in repaired.trees[0].nodes
                  if n.split is not None}
    assert 15.0 in thresholds
    # repaired subtree belongs to the label holder
    new_owner = {n.split.owner_party for n in repaired.trees[0].nodes
                 if n.split is not None and n.split.threshold not in
                 (10.0, 15.0)}
    assert new_owner <= {1}
    # clean training accuracy can only improve
    acc_before = (model.predict(features) == clean).mean()
    acc_after = (repaired.predict(features) == clean).mean()
    assert acc_after >= acc_before
    assert acc_after == 1.0


def test_grafting_no_contamination_copies_everything():
    clean = np.array([0] * 10 + [1] * 10)
    features = np.arange(20, dtype=np.float64).reshape(-1, 1)
    model, _ = _depth_two_model(clean, 2)
    repaired, report = grafting(model, clean, clean,
                                active_feature_indices=[0],
                                features=features)
    assert report.flagged_total == 0 and report.resplit_total == 0
    # rebuild renumbers nodes; the structure and predictions must not move
    def shape(m):
        return sorted((n.depth, n.split.feature_index, n.split.threshold,
                       n.split.owner_party)
                      for t in m.trees for n in t.nodes if n.split)
    assert shape(repaired) == shape(model)
    assert sum(len(t.nodes) for t in repaired.trees) \
        == sum(len(t.nodes) for t in model.trees)
    np.testing.assert_allclose(repaired.predict_scores(features),
                               model.predict_scores(features))


def test_grafting_rejects_boosted_models():
    model = TreeModel(model_kind=XGBOOST, class_count=2, max_depth=3,
                      tree_count=0, feature_subsample_ratio=1.0)
    with pytest.raises(UnsupportedModelError):
        grafting(model, np.zeros(1, dtype=np.int64),
                 np.zeros(1, dtype=np.int64), [0], np.zeros((1, 1)))


def test_graft_report_serializes():
    r = GraftReport()
    r.add(0, [3], {1}, 2)
    d = r.to_json_dict()
    assert d["trees"][0]["resplit_nodes"] == [1]


def test_noisy_labels_coerces_arrays():
    out = NoisyLabels(original=[0, 1], noised=[1, 1], epsilon=1.0,
                      mechanism="rr")
    assert out.original.dtype == np.int64
