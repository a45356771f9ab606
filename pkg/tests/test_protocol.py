"""Federated training protocol: determinism, communication accounting,
defense wiring, and the structural soundness of what passive parties see."""

import hashlib
import math

import numpy as np
import pytest

from treeleak.datasets import PartitionSpec, gen_synthetic_tree, make_partition
from treeleak.idlmid import counts_for_space, mi_upper_bound
from treeleak.protocol import (CommStats, DefenseConfig, PartyTranscript,
                               ProtocolConfig, ProtocolConfigError,
                               TranscriptEvent, UndefinedRateError,
                               build_parties, comm_rate, train_federated)


def _cfg(**kw):
    base = dict(model_kind="random_forest", max_depth=4, tree_count=2,
                feature_subsample=1.0, percentile_count=8, seed=5)
    base.update(kw)
    return ProtocolConfig(**base)


@pytest.fixture(scope="module")
def small_setup():
    data = gen_synthetic_tree(n=120, f=6, c=3, depth=3, seed=41,
                              flip_fraction=0.02)
    views = make_partition(data, PartitionSpec(mode="explicit", explicit=[[0, 1], [2, 3], [4, 5]]))
    return data, views


@pytest.fixture(scope="module")
def binary_setup():
    data = gen_synthetic_tree(n=100, f=4, c=2, depth=3, seed=42)
    views = make_partition(data, PartitionSpec(mode="explicit", explicit=[[0, 1], [2, 3]]))
    return data, views


def _transcript_blob(result):
    return {pid: tr.to_json() for pid, tr in result.transcripts.items()}


# ---------------------------------------------------------------- determinism

def test_same_seed_reproduces_everything(small_setup):
    data, views = small_setup
    a = train_federated(_cfg(), views, data)
    b = train_federated(_cfg(), views, data)
    assert _transcript_blob(a) == _transcript_blob(b)
    assert a.comm.to_dict() == b.comm.to_dict()
    assert a.protocol_log == b.protocol_log
    xs = data.features
    assert np.array_equal(a.model.predict(xs), b.model.predict(xs))


def test_seed_changes_transcripts(small_setup):
    # the seed enters through feature subsampling, so subsample for real
    data, views = small_setup
    a = train_federated(_cfg(seed=5, feature_subsample=0.5), views, data)
    b = train_federated(_cfg(seed=6, feature_subsample=0.5), views, data)
    assert _transcript_blob(a) != _transcript_blob(b)


def test_transcript_json_roundtrip(small_setup):
    data, views = small_setup
    result = train_federated(_cfg(), views, data)
    for tr in result.transcripts.values():
        back = PartyTranscript.from_json(tr.to_json())
        assert back.to_json() == tr.to_json()
        assert back.party_id == tr.party_id
        assert len(back.events) == len(tr.events)


# ------------------------------------------------------- ciphertext counting

def test_forest_label_broadcast_charge(small_setup):
    data, views = small_setup
    result = train_federated(_cfg(), views, data)
    n, c, passive = data.n_samples, data.class_count, len(views) - 1
    assert result.comm.label_broadcast == passive * n * c
    for tr in result.transcripts.values():
        first = tr.events[0]
        assert first.kind == "cipher"
        assert first.payload == "encrypted_onehot_labels"
        assert first.count == n * c
        # 512-bit keys put ciphertexts in Z_{n^2}, 128 bytes each
        assert first.byte_length == first.count * 128


def test_candidate_charge_matches_events(small_setup):
    data, views = small_setup
    result = train_federated(_cfg(), views, data)
    c = data.class_count
    seen = 0
    for tr in result.transcripts.values():
        for e in tr.events:
            if e.kind == "cipher" and e.payload == "split_class_sums":
                assert e.count % (2 * c) == 0
                assert e.direction == "sent"
                seen += e.count
    assert result.comm.candidate_sums == seen
    assert result.comm.gradient_broadcast == 0
    assert result.comm.purity_sums == 0


def test_boosting_gradient_charge(binary_setup):
    data, views = binary_setup
    cfg = _cfg(model_kind="xgboost", tree_count=3)
    result = train_federated(cfg, views, data)
    n, passive = data.n_samples, len(views) - 1
    # binary: one tree per round, each federated tree ships g and h per row
    assert result.comm.gradient_broadcast == passive * n * 2 * cfg.tree_count
    assert result.comm.label_broadcast == 0
    for tr in result.transcripts.values():
        for e in tr.events:
            if e.kind == "cipher" and e.payload == "split_grad_hess_sums":
                assert e.count % 4 == 0


def test_cipher_blobs_are_deterministic_digests(small_setup):
    data, views = small_setup
    result = train_federated(_cfg(), views, data)
    for pid, tr in result.transcripts.items():
        for e in tr.events:
            if e.kind != "cipher":
                continue
            tag = "%d:%d:%s:%d:%d" % (pid, e.seq, e.direction, e.count,
                                      e.byte_length)
            want = hashlib.blake2s(tag.encode(), digest_size=16).hexdigest()
            assert e.blob_hex == want


def test_comm_rate_and_undefined_baseline():
    defended = CommStats(label_broadcast=30)
    baseline = CommStats(label_broadcast=40, candidate_sums=20)
    assert comm_rate(defended, baseline) == pytest.approx(0.5)
    with pytest.raises(UndefinedRateError):
        comm_rate(defended, CommStats())


# -------------------------------------------------------------- tree layout

def test_multiclass_boosting_trains_one_tree_per_class(small_setup):
    data, views = small_setup
    cfg = _cfg(model_kind="xgboost", tree_count=2)
    result = train_federated(cfg, views, data)
    trees = result.model.trees
    assert len(trees) == 2 * data.class_count
    assert [t.class_slot for t in trees] == [0, 1, 2, 0, 1, 2]
    assert [t.round_index for t in trees] == [0, 0, 0, 1, 1, 1]


def test_binary_boosting_uses_slot_one(binary_setup):
    data, views = binary_setup
    result = train_federated(_cfg(model_kind="xgboost", tree_count=3),
                             views, data)
    assert len(result.model.trees) == 3
    assert all(t.class_slot == 1 for t in result.model.trees)


def test_feature_subsample_size(small_setup):
    data, views = small_setup
    result = train_federated(_cfg(feature_subsample=0.5, tree_count=4),
                             views, data)
    want = math.ceil(0.5 * data.n_features)
    for tree in result.model.trees:
        sub = tree.feature_subset
        assert len(sub) == want
        assert len(np.unique(sub)) == want
        assert np.all(np.diff(sub) > 0)
        assert sub.min() >= 0 and sub.max() < data.n_features


# ----------------------------------------------------- structural soundness

def test_split_nodes_partition_their_space(small_setup):
    data, views = small_setup
    result = train_federated(_cfg(), views, data)
    for tree in result.model.trees:
        root = tree.nodes[0]
        assert sorted(root.instance_space) == list(range(data.n_samples))
        for node in tree.nodes:
            if node.split is None:
                continue
            li, ri = node.children
            left = set(tree.nodes[li].instance_space.tolist())
            right = set(tree.nodes[ri].instance_space.tolist())
            assert left.isdisjoint(right)
            assert left | right == set(node.instance_space.tolist())
            assert left and right


def test_depth_and_purity_stops(small_setup):
    data, views = small_setup
    cfg = _cfg(max_depth=3, tree_count=3)
    result = train_federated(cfg, views, data)
    y = data.labels
    for tree in result.model.trees:
        for node in tree.nodes:
            assert node.depth <= cfg.max_depth
            if node.split is not None:
                assert node.depth < cfg.max_depth
                assert len(node.instance_space) >= cfg.min_samples_split
                assert len(np.unique(y[node.instance_space])) > 1


def test_adopted_split_has_maximal_score(small_setup):
    data, views = small_setup
    for kind in ("random_forest", "xgboost"):
        result = train_federated(_cfg(model_kind=kind), views, data)
        for entry in result.protocol_log:
            assert entry["adopted"][3] == pytest.approx(
                max(entry["scores"]), abs=1e-12)


def test_owned_splits_match_model(small_setup):
    data, views = small_setup
    result = train_federated(_cfg(), views, data)
    trees = {t.tree_id: t for t in result.model.trees}
    owned_any = 0
    for pid, tr in result.transcripts.items():
        for e in tr.events:
            if e.kind != "owned_split":
                continue
            owned_any += 1
            node = trees[e.tree_id].nodes[e.node_id]
            assert node.split.owner_party == pid
            assert node.split.feature_index == e.feature_index
            assert node.split.threshold == pytest.approx(e.threshold)
            assert set(e.left) | set(e.right) == set(
                node.instance_space.tolist())
            assert set(e.left).isdisjoint(e.right)
    assert owned_any > 0  # passive columns do win splits on this data


def test_passive_transcripts_never_carry_labels(small_setup):
    data, views = small_setup
    result = train_federated(_cfg(), views, data)
    allowed = set(TranscriptEvent.__dataclass_fields__)
    for tr in result.transcripts.values():
        assert 1 not in result.transcripts  # the label holder keeps no log
        for e in tr.events:
            assert e.kind in ("broadcast", "owned_split", "cipher")
            assert set(e.to_dict()) <= allowed


# ------------------------------------------------------------- tie breaking

def test_gain_tie_goes_to_lowest_party():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(80, 3))
    x[:, 1] = x[:, 0]  # party 2 holds an exact copy of party 1's column
    y = (x[:, 0] > 0).astype(np.int64)
    data = gen_synthetic_tree(n=80, f=3, c=2, depth=1, seed=0)
    data.features[:] = x
    data.labels[:] = y
    views = make_partition(data, PartitionSpec(mode="explicit", explicit=[[0], [1, 2]]))
    result = train_federated(_cfg(max_depth=1, tree_count=1,
                                  percentile_count=16), views, data)
    root = result.model.trees[0].nodes[0]
    assert root.split.owner_party == 1
    assert root.split.feature_index == 0


def test_gain_tie_goes_to_lowest_feature():
    rng = np.random.default_rng(4)
    x = np.zeros((80, 3))
    x[:, 0] = rng.normal(size=80) * 1e-9  # near-constant noise for party 1
    x[:, 1] = rng.normal(size=80)
    x[:, 2] = x[:, 1]  # duplicate informative columns inside party 2
    y = (x[:, 1] > 0).astype(np.int64)
    data = gen_synthetic_tree(n=80, f=3, c=2, depth=1, seed=0)
    data.features[:] = x
    data.labels[:] = y
    views = make_partition(data, PartitionSpec(mode="explicit", explicit=[[0], [1, 2]]))
    result = train_federated(_cfg(max_depth=1, tree_count=1,
                                  percentile_count=16), views, data)
    root = result.model.trees[0].nodes[0]
    assert root.split.owner_party == 2
    assert root.split.feature_index == 1


# -------------------------------------------------------- broadcast policies

def test_eager_policy_reveals_leaf_spaces(small_setup):
    data, views = small_setup
    result = train_federated(_cfg(tree_count=1), views, data)
    tree = result.model.trees[0]
    tr = result.transcripts[2]
    seen = {(e.tree_id, tuple(e.space)) for e in tr.events
            if e.kind == "broadcast"}
    for leaf in tree.leaves():
        assert (0, tuple(int(i) for i in leaf.instance_space)) in seen


def test_on_division_policy_hides_leaf_spaces(small_setup):
    data, views = small_setup
    result = train_federated(_cfg(tree_count=1,
                                  broadcast_policy="on_division"),
                             views, data)
    tree = result.model.trees[0]
    tr = result.transcripts[2]
    seen = {tuple(e.space) for e in tr.events if e.kind == "broadcast"}
    split_spaces = {tuple(int(i) for i in n.instance_space)
                    for n in tree.nodes if n.split is not None}
    assert seen == split_spaces
    for leaf in tree.leaves():
        assert tuple(int(i) for i in leaf.instance_space) not in seen


def test_on_division_broadcasts_fewer_nodes(small_setup):
    data, views = small_setup
    eager = train_federated(_cfg(), views, data)
    lazy = train_federated(_cfg(broadcast_policy="on_division"), views, data)

    def n_broadcasts(result):
        return sum(1 for tr in result.transcripts.values()
                   for e in tr.events if e.kind == "broadcast")

    assert n_broadcasts(lazy) < n_broadcasts(eager)


# ------------------------------------------------------------ defense wiring

def test_reduced_leakage_first_round_stays_private(binary_setup):
    data, views = binary_setup
    cfg = _cfg(model_kind="xgboost", tree_count=3,
               defense=DefenseConfig(kind="reduced_leakage"))
    result = train_federated(cfg, views, data)
    for tr in result.transcripts.values():
        assert all(e.tree_id != 0 for e in tr.events)
        assert any(e.tree_id == 1 for e in tr.events)
    baseline = train_federated(_cfg(model_kind="xgboost", tree_count=3),
                               views, data)
    n, passive = data.n_samples, len(views) - 1
    assert result.comm.gradient_broadcast == passive * n * 2 * 2
    assert comm_rate(result.comm, baseline.comm) < 1.0
    assert len(result.model.trees) == 3


def test_reduced_leakage_rejects_forests():
    with pytest.raises(ProtocolConfigError):
        _cfg(defense=DefenseConfig(kind="reduced_leakage"))


def test_id_lmid_bounds_every_broadcast(small_setup):
    data, views = small_setup
    xi = 0.5
    cfg = _cfg(defense=DefenseConfig(kind="id_lmid", xi=xi), tree_count=3)
    result = train_federated(cfg, views, data)
    y, c, n = data.labels, data.class_count, data.n_samples
    checked = 0
    for tr in result.transcripts.values():
        for e in tr.events:
            if e.kind != "broadcast" or e.node_id == 0:
                continue  # the root space is everyone's by construction
            counts = counts_for_space(y, np.asarray(e.space), c)
            assert mi_upper_bound(counts) <= xi + 1e-12
            checked += 1
    assert checked > 0


def test_id_lmid_purity_exchange_only_for_boosting(small_setup):
    data, views = small_setup
    n, c, passive = data.n_samples, data.class_count, len(views) - 1
    forest = train_federated(
        _cfg(defense=DefenseConfig(kind="id_lmid", xi=1.0)), views, data)
    # forests already score splits from the label ciphertexts, nothing extra
    assert forest.comm.purity_sums == 0
    assert forest.comm.label_broadcast == passive * n * c
    boosted = train_federated(
        _cfg(model_kind="xgboost",
             defense=DefenseConfig(kind="id_lmid", xi=1.0)), views, data)
    assert boosted.comm.label_broadcast == passive * n * c
    assert boosted.comm.purity_sums > 0
    assert boosted.comm.purity_sums % (4 * c) == 0


def test_lp_mst_trains_on_noised_labels(small_setup):
    data, views = small_setup
    cfg = _cfg(defense=DefenseConfig(kind="lp_mst", epsilon=1.0))
    result = train_federated(cfg, views, data)
    assert result.noisy_labels is not None
    assert result.noisy_labels.mechanism == "lp_2st"
    assert np.array_equal(result.training_labels, result.noisy_labels.noised)
    assert np.array_equal(result.noisy_labels.original, data.labels)
    assert not np.array_equal(result.training_labels, data.labels)
    one_stage = train_federated(
        _cfg(defense=DefenseConfig(kind="lp_mst", epsilon=1.0, stages=1)),
        views, data)
    assert one_stage.noisy_labels.mechanism == "lp_1st"


def test_grafting_never_touches_the_transcript(small_setup):
    data, views = small_setup
    noised = train_federated(
        _cfg(defense=DefenseConfig(kind="lp_mst", epsilon=1.0)), views, data)
    grafted = train_federated(
        _cfg(defense=DefenseConfig(kind="grafting_ldp", epsilon=1.0)),
        views, data)
    assert _transcript_blob(grafted) == _transcript_blob(noised)
    assert grafted.comm.to_dict() == noised.comm.to_dict()
    assert grafted.graft_report is not None
    assert noised.graft_report is None
    # the passive parties can only ever reconstruct the pre-repair model
    assert grafted.passive_model is not grafted.model
    assert grafted.graft_report.flagged_total >= 0


def test_grafted_model_drops_noise_artifacts(small_setup):
    data, views = small_setup
    grafted = train_federated(
        _cfg(defense=DefenseConfig(kind="grafting_ldp", epsilon=0.5),
             tree_count=3), views, data)
    assert grafted.graft_report.flagged_total > 0  # eps 0.5 noise is heavy
    y = data.labels
    acc_passive = np.mean(grafted.passive_model.predict(data.features) == y)
    acc_repaired = np.mean(grafted.model.predict(data.features) == y)
    assert acc_repaired >= acc_passive


# ------------------------------------------------------------- config errors

@pytest.mark.parametrize("kw", [
    dict(model_kind="gradient_forest"),
    dict(max_depth=0),
    dict(tree_count=0),
    dict(feature_subsample=0.0),
    dict(feature_subsample=1.5),
    dict(percentile_count=0),
])
def test_protocol_config_rejects(kw):
    with pytest.raises(ProtocolConfigError):
        _cfg(**kw)


@pytest.mark.parametrize("kw", [
    dict(kind="shuffle"),
    dict(kind="lp_mst"),
    dict(kind="lp_mst", epsilon=0.0),
    dict(kind="lp_mst", epsilon=1.0, stages=3),
    dict(kind="grafting_ldp"),
    dict(kind="id_lmid"),
    dict(kind="id_lmid", xi=-0.1),
])
def test_defense_config_rejects(kw):
    with pytest.raises(ProtocolConfigError):
        DefenseConfig(**kw)


def test_build_parties_validates_label_holder(small_setup):
    data, views = small_setup
    flipped = [type(v)(party_id=v.party_id, feature_indices=v.feature_indices,
                       has_labels=(v.party_id == 2)) for v in views]
    with pytest.raises(ProtocolConfigError):
        build_parties(flipped, data)
    doubled = [type(v)(party_id=v.party_id, feature_indices=v.feature_indices,
                       has_labels=(v.party_id in (1, 2))) for v in views]
    with pytest.raises(ProtocolConfigError):
        build_parties(doubled, data)


def test_build_parties_slices_columns(small_setup):
    data, views = small_setup
    parties = build_parties(views, data)
    assert [p.party_id for p in parties] == [1, 2, 3]
    assert parties[0].labels is not None
    assert all(p.labels is None for p in parties[1:])
    for p, cols in zip(parties, ([0, 1], [2, 3], [4, 5])):
        assert np.array_equal(p.features, data.features[:, cols])


# ------------------------------------------------------------------ learning

def test_both_model_kinds_fit_the_training_data(small_setup):
    data, views = small_setup
    for kind, floor in (("random_forest", 0.85), ("xgboost", 0.85)):
        cfg = _cfg(model_kind=kind, tree_count=4, max_depth=5)
        result = train_federated(cfg, views, data)
        acc = np.mean(result.model.predict(data.features) == data.labels)
        assert acc >= floor, (kind, acc)
