"""In-process simulation of split finding across vertically partitioned
parties.

Party 1 (the active party) holds the labels and orchestrates growth: it
broadcasts the instance space of each node about to be divided, gathers
scored split candidates from every party, adopts the best one, and asks the
winner for the child spaces. Everything each feature-only party gets to see
lands in its transcript, which doubles as the wire trace the attack and the
audits consume. Ciphertext traffic is charged to CommStats exactly as the
real exchanges would send it, while the arithmetic itself runs on plaintext
at the active party (same values, honest cost model).
"""

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .idlmid import mi_upper_bound_batch
from .ldp import grafting, lp_mst
from .trees import (RANDOM_FOREST, XGBOOST, BoosterParams, Split,
                    SplitStatistics, Tree, TreeModel, grad_hess,
                    percentile_thresholds)

DEFENSE_KINDS = ("none", "lp_mst", "grafting_ldp", "id_lmid", "reduced_leakage")


class ProtocolConfigError(ValueError):
    pass


class UndefinedRateError(ZeroDivisionError):
    pass


@dataclass
class DefenseConfig:
    kind: str = "none"
    epsilon: float = None
    xi: float = None
    stages: int = 2
    graft: bool = False
    he_backend: str = "mock"
    key_bits: int = 512

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ProtocolConfigError(f"unknown defense '{self.kind}'")
        if self.kind in ("lp_mst", "grafting_ldp"):
            if self.epsilon is None or self.epsilon <= 0:
                raise ProtocolConfigError("label randomization needs epsilon > 0")
            if self.stages not in (1, 2):
                raise ProtocolConfigError("stages must be 1 or 2")
        if self.kind == "id_lmid":
            if self.xi is None or self.xi < 0:
                raise ProtocolConfigError("id_lmid needs xi >= 0")

    @property
    def wants_graft(self):
        return self.kind == "grafting_ldp" or (self.kind == "lp_mst" and self.graft)


@dataclass
class ProtocolConfig:
    model_kind: str = RANDOM_FOREST
    max_depth: int = 6
    tree_count: int = 5
    feature_subsample: float = 0.8
    percentile_count: int = 32
    learning_rate: float = 0.3
    lambda_reg: float = 1.0
    gamma_reg: float = 0.0
    min_samples_split: int = 2
    broadcast_policy: str = "eager"
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.defense, dict):
            self.defense = DefenseConfig(**self.defense)
        if self.model_kind not in (RANDOM_FOREST, XGBOOST):
            raise ProtocolConfigError(f"unknown model kind '{self.model_kind}'")
        if self.broadcast_policy not in ("eager", "on_division"):
            raise ProtocolConfigError(
                f"unknown broadcast policy '{self.broadcast_policy}'")
        if self.max_depth < 1 or self.tree_count < 1:
            raise ProtocolConfigError("max_depth and tree_count must be >= 1")
        if not 0.0 < self.feature_subsample <= 1.0:
            raise ProtocolConfigError("feature_subsample must lie in (0, 1]")
        if self.percentile_count < 1:
            raise ProtocolConfigError("percentile_count must be >= 1")
        if self.defense.kind == "reduced_leakage" and self.model_kind != XGBOOST:
            raise ProtocolConfigError(
                "reduced_leakage holds back the first boosting round and is "
                "defined for xgboost only")

    def booster(self):
        return BoosterParams(learning_rate=self.learning_rate,
                             lambda_reg=self.lambda_reg, gamma_reg=self.gamma_reg)


@dataclass
class Party:
    """One participant: its column slice, and labels if it is party 1."""

    party_id: int
    view: object
    features: np.ndarray  # (n_train, local feature count)
    labels: np.ndarray = None

    @property
    def is_active(self):
        return self.party_id == 1


@dataclass
class SplitCandidate:
    """A scored threshold proposal; child spaces stay with the owner until
    the split is adopted."""

    owner_party: int
    candidate_id: int
    feature_index: int  # global column id
    threshold: float
    score: float
    stats: SplitStatistics
    _values: np.ndarray = field(default=None, repr=False)

    def materialize(self, node_space):
        """Child instance spaces, produced by the owner on adoption."""
        mask = self._values < self.threshold
        return node_space[mask], node_space[~mask]


@dataclass
class TranscriptEvent:
    seq: int
    kind: str  # "broadcast" | "owned_split" | "cipher"
    tree_id: int = None
    node_id: int = None
    space: list = None
    feature_index: int = None
    threshold: float = None
    left: list = None
    right: list = None
    direction: str = None
    count: int = None
    payload: str = None
    byte_length: int = None
    blob_hex: str = None

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class PartyTranscript:
    """Everything one feature-only party observed, in protocol order."""

    party_id: int
    n_train: int
    class_count: int
    events: list = field(default_factory=list)

    def _next_seq(self):
        return len(self.events)

    def record_broadcast(self, tree_id, node_id, space):
        self.events.append(TranscriptEvent(
            seq=self._next_seq(), kind="broadcast", tree_id=tree_id,
            node_id=node_id, space=[int(i) for i in space]))

    def record_owned_split(self, tree_id, node_id, feature_index, threshold,
                           left, right):
        self.events.append(TranscriptEvent(
            seq=self._next_seq(), kind="owned_split", tree_id=tree_id,
            node_id=node_id, feature_index=int(feature_index),
            threshold=float(threshold), left=[int(i) for i in left],
            right=[int(i) for i in right]))

    def record_cipher(self, direction, count, payload, byte_length,
                      blob_hex=None, tree_id=None, node_id=None):
        seq = self._next_seq()
        if blob_hex is None:
            # opaque stand-in for the wire bytes; byte_length is the real cost
            tag = "%d:%d:%s:%d:%d" % (self.party_id, seq, direction,
                                      int(count), int(byte_length))
            blob_hex = hashlib.blake2s(tag.encode(), digest_size=16).hexdigest()
        self.events.append(TranscriptEvent(
            seq=seq, kind="cipher", direction=direction,
            count=int(count), payload=payload, byte_length=int(byte_length),
            blob_hex=blob_hex, tree_id=tree_id, node_id=node_id))

    @property
    def ciphertext_count(self):
        return sum(e.count for e in self.events if e.kind == "cipher")

    def tree_order(self):
        """Tree ids in order of first observation."""
        seen = []
        for e in self.events:
            if e.tree_id is not None and e.kind != "cipher" and e.tree_id not in seen:
                seen.append(e.tree_id)
        return seen

    def to_json_dict(self):
        return {"party_id": self.party_id, "n_train": self.n_train,
                "class_count": self.class_count,
                "ciphertext_count": self.ciphertext_count,
                "events": [e.to_dict() for e in self.events]}

    def to_json(self):
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json_dict(cls, d):
        tr = cls(party_id=d["party_id"], n_train=d["n_train"],
                 class_count=d["class_count"])
        for ed in d["events"]:
            tr.events.append(TranscriptEvent(**{k: ed.get(k) for k in
                                                TranscriptEvent.__dataclass_fields__}))
        return tr

    @classmethod
    def from_json(cls, text):
        return cls.from_json_dict(json.loads(text))


@dataclass
class CommStats:
    """Ciphertext counts by purpose; totals feed the rate comparisons."""

    label_broadcast: int = 0
    gradient_broadcast: int = 0
    candidate_sums: int = 0
    purity_sums: int = 0

    @property
    def total(self):
        return (self.label_broadcast + self.gradient_broadcast
                + self.candidate_sums + self.purity_sums)

    def to_dict(self):
        return {"label_broadcast": self.label_broadcast,
                "gradient_broadcast": self.gradient_broadcast,
                "candidate_sums": self.candidate_sums,
                "purity_sums": self.purity_sums, "total": self.total}


def comm_rate(defended, baseline):
    """Ciphertext count of a defended run relative to its baseline."""
    if baseline.total == 0:
        raise UndefinedRateError("baseline run communicated no ciphertexts")
    return defended.total / baseline.total


@dataclass
class TrainResult:
    model: TreeModel            # the active party's best model (repaired if grafted)
    transcripts: dict           # party_id -> PartyTranscript (passive parties)
    comm: CommStats
    passive_model: TreeModel = None  # pre-repair model, identical unless grafted
    noisy_labels: object = None
    graft_report: object = None
    protocol_log: list = None
    training_labels: np.ndarray = None


def propose_splits(party, node_space, percentile_count, evaluator,
                   feature_subset=None):
    """One party's candidate list for a node.

    For every local feature inside the tree's feature subset, thresholds are
    evenly spaced percentiles of the values restricted to the node; left is
    the strict-less side. Candidates with an empty child never form.

    Args:
        evaluator: callable(values, thresholds) -> list of
            (threshold, score, SplitStatistics); supplied by the active
            party, which holds the statistics needed for scoring.
    """
    node_space = np.asarray(node_space, dtype=np.int64)
    if len(node_space) == 0:
        raise ValueError("cannot propose splits for an empty node")
    cols = party.view.feature_indices
    if feature_subset is not None:
        cols = np.intersect1d(cols, feature_subset)
    out = []
    for f in cols:
        local = int(np.searchsorted(party.view.feature_indices, f))
        vals = party.features[node_space, local]
        thresholds = percentile_thresholds(vals, percentile_count)
        if len(thresholds) == 0:
            continue
        for thr, score, stats in evaluator(vals, thresholds):
            out.append(SplitCandidate(
                owner_party=party.party_id, candidate_id=len(out),
                feature_index=int(f), threshold=float(thr), score=float(score),
                stats=stats, _values=vals))
    return out


def _rf_evaluator(labels_node, class_count):
    n = len(labels_node)
    onehot = np.zeros((n, class_count), dtype=np.float64)
    onehot[np.arange(n), labels_node] = 1.0
    counts = onehot.sum(axis=0)
    parent_purity = float(np.dot(counts / n, counts / n))

    def evaluate(vals, thresholds):
        mask = vals[:, None] < thresholds[None, :]
        n_left = mask.sum(axis=0)
        valid = (n_left > 0) & (n_left < n)
        if not valid.any():
            return []
        lc = onehot.T @ mask  # class_count x l
        rc = counts[:, None] - lc
        n_right = n - n_left
        with np.errstate(invalid="ignore", divide="ignore"):
            lp = np.square(lc / np.maximum(n_left, 1)).sum(axis=0)
            rp = np.square(rc / np.maximum(n_right, 1)).sum(axis=0)
        gains = n_left / n * lp + n_right / n * rp - parent_purity
        out = []
        for j in np.flatnonzero(valid):
            stats = SplitStatistics(
                n=n, n_left=int(n_left[j]), n_right=int(n_right[j]),
                class_counts=counts.astype(np.int64),
                left_class_counts=np.rint(lc[:, j]).astype(np.int64),
                right_class_counts=np.rint(rc[:, j]).astype(np.int64))
            out.append((float(thresholds[j]), float(gains[j]), stats))
        return out

    return evaluate


def _xgb_evaluator(labels_node, class_count, g_node, h_node, params):
    n = len(labels_node)
    onehot = np.zeros((n, class_count), dtype=np.float64)
    onehot[np.arange(n), labels_node] = 1.0
    counts = onehot.sum(axis=0)
    g_total, h_total = float(g_node.sum()), float(h_node.sum())
    lam, gamma = params.lambda_reg, params.gamma_reg
    parent_term = g_total ** 2 / (h_total + lam)

    def evaluate(vals, thresholds):
        mask = vals[:, None] < thresholds[None, :]
        n_left = mask.sum(axis=0)
        valid = (n_left > 0) & (n_left < n)
        if not valid.any():
            return []
        gl = g_node @ mask
        hl = h_node @ mask
        gr, hr = g_total - gl, h_total - hl
        gains = 0.5 * (gl ** 2 / (hl + lam) + gr ** 2 / (hr + lam)
                       - parent_term) - gamma
        lc = onehot.T @ mask
        out = []
        for j in np.flatnonzero(valid):
            stats = SplitStatistics(
                n=n, n_left=int(n_left[j]), n_right=int(n - n_left[j]),
                class_counts=counts.astype(np.int64),
                left_class_counts=np.rint(lc[:, j]).astype(np.int64),
                right_class_counts=(counts - lc[:, j]).astype(np.int64),
                grad_sum=g_total, hess_sum=h_total,
                left_grad_sum=float(gl[j]), left_hess_sum=float(hl[j]),
                right_grad_sum=float(gr[j]), right_hess_sum=float(hr[j]))
            out.append((float(thresholds[j]), float(gains[j]), stats))
        return out

    return evaluate


class _Grower:
    """Shared state for growing one ensemble under a fixed config."""

    def __init__(self, cfg, parties, training_labels, class_count, transcripts,
                 comm, rng):
        self.cfg = cfg
        self.parties = parties
        self.active = parties[0]
        self.passives = parties[1:]
        self.y = training_labels
        self.c = class_count
        self.transcripts = transcripts
        self.comm = comm
        self.rng = rng
        self.params = cfg.booster()
        self.log = []
        self.n = len(training_labels)
        self.global_counts = np.bincount(training_labels, minlength=class_count)
        self.ct_bytes = cfg.defense.key_bits // 4

    def draw_feature_subset(self, total_features):
        take = max(1, math.ceil(self.cfg.feature_subsample * total_features))
        return np.sort(self.rng.choice(total_features, size=take, replace=False))

    def grow_tree(self, tree_id, round_index, class_slot, feature_subset,
                  federated, grad=None, hess=None):
        tree = Tree(tree_id=tree_id, feature_subset=feature_subset,
                    round_index=round_index, class_slot=class_slot)
        self._build(tree, np.arange(self.n, dtype=np.int64), 0, federated,
                    grad, hess)
        return tree

    def _leaf(self, node, grad, hess):
        ids = node.instance_space
        if self.cfg.model_kind == RANDOM_FOREST:
            counts = np.bincount(self.y[ids], minlength=self.c)
            node.leaf_weight = counts.astype(np.float64) / len(ids)
        else:
            w = -grad[ids].sum() / (hess[ids].sum() + self.params.lambda_reg)
            node.leaf_weight = np.zeros(self.c, dtype=np.float64)
            node.leaf_weight[self.tree_slot] = w

    def _evaluator(self, space, grad, hess):
        y_node = self.y[space]
        if self.cfg.model_kind == RANDOM_FOREST:
            return _rf_evaluator(y_node, self.c)
        return _xgb_evaluator(y_node, self.c, grad[space], hess[space],
                              self.params)

    def _charge_candidates(self, party, tree, node, count):
        if count == 0:
            return
        if self.cfg.model_kind == RANDOM_FOREST:
            ciphers = 2 * self.c * count
            self.comm.candidate_sums += ciphers
            self.transcripts[party.party_id].record_cipher(
                "sent", ciphers, "split_class_sums", ciphers * self.ct_bytes,
                tree_id=tree.tree_id, node_id=node.node_id)
        else:
            ciphers = 4 * count
            self.comm.candidate_sums += ciphers
            self.transcripts[party.party_id].record_cipher(
                "sent", ciphers, "split_grad_hess_sums", ciphers * self.ct_bytes,
                tree_id=tree.tree_id, node_id=node.node_id)
            if self.cfg.defense.kind == "id_lmid":
                purity = 4 * self.c * count
                self.comm.purity_sums += purity
                self.transcripts[party.party_id].record_cipher(
                    "sent", purity, "purity_sums", purity * self.ct_bytes,
                    tree_id=tree.tree_id, node_id=node.node_id)

    def _admissible_children(self, candidates):
        """Vector of bools: both children of each candidate stay within xi."""
        if not candidates:
            return np.zeros(0, dtype=bool)
        xi = self.cfg.defense.xi
        left = np.stack([c.stats.left_class_counts for c in candidates])
        right = np.stack([c.stats.right_class_counts for c in candidates])
        lb = mi_upper_bound_batch(left, self.global_counts, self.n)
        rb = mi_upper_bound_batch(right, self.global_counts, self.n)
        return (lb <= xi) & (rb <= xi)

    def _broadcast(self, tree, node):
        node.broadcast = True
        for p in self.passives:
            self.transcripts[p.party_id].record_broadcast(
                tree.tree_id, node.node_id, node.instance_space)

    def _build(self, tree, space, depth, federated, grad, hess):
        node = tree.add_node(depth, space)
        eager = self.cfg.broadcast_policy == "eager"
        if federated and eager:
            # adopted child spaces go out as soon as the node exists, so
            # leaf spaces are passive-visible too
            self._broadcast(tree, node)
        if (depth >= self.cfg.max_depth
                or len(space) < self.cfg.min_samples_split
                or len(np.unique(self.y[space])) <= 1):
            self._leaf(node, grad, hess)
            return node.node_id

        if federated and not eager:
            self._broadcast(tree, node)

        evaluator = self._evaluator(space, grad, hess)
        candidates = []
        for party in (self.parties if federated else [self.active]):
            cands = propose_splits(party, space, self.cfg.percentile_count,
                                   evaluator, tree.feature_subset)
            if not party.is_active:
                self._charge_candidates(party, tree, node, len(cands))
            candidates.extend(cands)

        if self.cfg.defense.kind == "id_lmid" and federated:
            passive = [c for c in candidates if c.owner_party != 1]
            keep = self._admissible_children(passive)
            dropped = {id(c) for c, ok in zip(passive, keep) if not ok}
            candidates = [c for c in candidates if id(c) not in dropped]

        if not candidates:
            self._leaf(node, grad, hess)
            return node.node_id

        best = min(candidates, key=lambda c: (-c.score, c.owner_party,
                                              c.feature_index, c.threshold))
        self.log.append({
            "tree_id": tree.tree_id, "node_id": node.node_id,
            "federated": federated, "n_candidates": len(candidates),
            "scores": [c.score for c in candidates],
            "adopted": (best.owner_party, best.feature_index, best.threshold,
                        best.score)})

        left_ids, right_ids = best.materialize(space)
        if best.owner_party != 1:
            self.transcripts[best.owner_party].record_owned_split(
                tree.tree_id, node.node_id, best.feature_index, best.threshold,
                left_ids, right_ids)
        node.split = Split(owner_party=best.owner_party,
                           feature_index=best.feature_index,
                           threshold=best.threshold)

        child_federated = federated
        if federated and self.cfg.defense.kind == "id_lmid":
            ok = self._admissible_children([best])
            if not bool(ok[0]):
                child_federated = False  # the whole subtree stays active-only

        left = self._build(tree, left_ids, depth + 1, child_federated, grad, hess)
        right = self._build(tree, right_ids, depth + 1, child_federated, grad, hess)
        node.children = (left, right)
        return node.node_id


def build_parties(views, train):
    """Slice the training table into per-party feature matrices."""
    views = sorted(views, key=lambda v: v.party_id)
    if views[0].party_id != 1 or not views[0].has_labels:
        raise ProtocolConfigError("party 1 must be the label holder")
    if any(v.has_labels for v in views[1:]):
        raise ProtocolConfigError("exactly one party may hold labels")
    parties = []
    for v in views:
        parties.append(Party(party_id=v.party_id, view=v,
                             features=train.features[:, v.feature_indices],
                             labels=train.labels if v.has_labels else None))
    return parties


def train_federated(cfg, views, train):
    """Run the full protocol and return the model, transcripts, and costs.

    Label randomization defenses noise the labels before any tree grows;
    the admissibility defense filters candidates during growth; the grafting
    variant repairs the trained forest afterwards without touching a single
    recorded message.
    """
    parties = build_parties(views, train)
    active = parties[0]
    rng = np.random.default_rng(cfg.seed)
    n, c = train.n_samples, train.class_count
    total_features = train.n_features

    transcripts = {p.party_id: PartyTranscript(p.party_id, n, c)
                   for p in parties[1:]}
    comm = CommStats()
    ct_bytes = cfg.defense.key_bits // 4

    noisy = None
    training_labels = train.labels
    if cfg.defense.kind in ("lp_mst", "grafting_ldp"):
        stages = cfg.defense.stages
        if active.features.shape[1] == 0 and stages == 2:
            warnings.warn("label holder has no features; falling back to a "
                          "single noising stage", stacklevel=2)
            stages = 1
        noisy = lp_mst(active.features, train.labels, c, cfg.defense.epsilon,
                       stages=stages, seed=int(rng.integers(0, 2 ** 63 - 1)))
        training_labels = noisy.noised

    grower = _Grower(cfg, parties, training_labels, c, transcripts, comm, rng)

    # one-time encrypted one-hot label broadcast: forest training scores
    # splits from these; boosting needs them only for the purity exchange
    if cfg.model_kind == RANDOM_FOREST or cfg.defense.kind == "id_lmid":
        per_party = n * c
        comm.label_broadcast += per_party * len(parties[1:])
        for p in parties[1:]:
            transcripts[p.party_id].record_cipher(
                "received", per_party, "encrypted_onehot_labels",
                per_party * ct_bytes)

    model = TreeModel(model_kind=cfg.model_kind, class_count=c,
                      max_depth=cfg.max_depth, tree_count=cfg.tree_count,
                      feature_subsample_ratio=cfg.feature_subsample,
                      booster=cfg.booster())

    if cfg.model_kind == RANDOM_FOREST:
        grower.tree_slot = None
        for t in range(cfg.tree_count):
            subset = grower.draw_feature_subset(total_features)
            tree = grower.grow_tree(t, t, None, subset, federated=True)
            model.trees.append(tree)
    else:
        slots = [1] if c == 2 else list(range(c))
        margins = np.zeros((n, c), dtype=np.float64)
        tree_id = 0
        for r in range(cfg.tree_count):
            g, h = grad_hess(training_labels, margins)
            for slot in slots:
                grower.tree_slot = slot
                subset = grower.draw_feature_subset(total_features)
                federated = not (cfg.defense.kind == "reduced_leakage" and r == 0)
                if federated:
                    per_party = n * 2
                    comm.gradient_broadcast += per_party * len(parties[1:])
                    for p in parties[1:]:
                        transcripts[p.party_id].record_cipher(
                            "received", per_party, "encrypted_grad_hess",
                            per_party * ct_bytes, tree_id=tree_id)
                tree = grower.grow_tree(tree_id, r, slot, subset, federated,
                                        grad=g[:, slot], hess=h[:, slot])
                model.trees.append(tree)
                for leaf in tree.leaves():
                    margins[leaf.instance_space, slot] += (
                        cfg.learning_rate * leaf.leaf_weight[slot])
                tree_id += 1

    result = TrainResult(model=model, transcripts=transcripts, comm=comm,
                         passive_model=model, noisy_labels=noisy,
                         protocol_log=grower.log,
                         training_labels=training_labels)

    if cfg.defense.wants_graft:
        repaired, report = grafting(model, train.labels, noisy.noised,
                                    active.view.feature_indices, train.features,
                                    percentile_limit=cfg.percentile_count)
        result.model = repaired
        result.graft_report = report

    return result
