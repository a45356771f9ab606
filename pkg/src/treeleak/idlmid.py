"""Mutual-information leakage bound for instance spaces, the admissibility
test built on it, and the encrypted purity exchange that lets the label
holder evaluate that test on splits proposed by feature-only parties."""

import math
from dataclasses import dataclass

import numpy as np

from .paillier import he_decrypt, he_sum


class UndefinedNodeError(ValueError):
    """The bound is undefined for an empty node."""


class ProtocolError(ValueError):
    """A secure-exchange message referenced an inconsistent id universe."""


@dataclass
class NodeClassCounts:
    """Class tallies for one instance space against the full training set."""

    total: int
    total_per_class: np.ndarray
    node: int
    node_per_class: np.ndarray

    def __post_init__(self):
        self.total_per_class = np.asarray(self.total_per_class, dtype=np.int64)
        self.node_per_class = np.asarray(self.node_per_class, dtype=np.int64)
        if self.node_per_class.sum() != self.node:
            raise ValueError("per-class node counts do not sum to the node size")
        if np.any(self.node_per_class > self.total_per_class):
            raise ValueError("node counts exceed global class totals")

    @property
    def complement(self):
        return self.total - self.node

    @property
    def complement_per_class(self):
        return self.total_per_class - self.node_per_class


def counts_for_space(labels, member_ids, class_count, total_per_class=None):
    """Build NodeClassCounts for the rows listed in member_ids."""
    labels = np.asarray(labels, dtype=np.int64)
    if total_per_class is None:
        total_per_class = np.bincount(labels, minlength=class_count)
    member_ids = np.asarray(member_ids, dtype=np.int64)
    node_counts = np.bincount(labels[member_ids], minlength=class_count)
    return NodeClassCounts(total=len(labels), total_per_class=total_per_class,
                           node=len(member_ids), node_per_class=node_counts)


def _kl_term(part_counts, part_total, global_counts, global_total):
    """sum_c (a_c/a) * ln((a_c/a) / (N_c/N)), with 0 * ln 0 := 0.

    An empty part contributes 0 by convention.
    """
    if part_total == 0:
        return 0.0
    acc = 0.0
    for a_c, n_c in zip(part_counts, global_counts):
        if a_c == 0:
            continue
        p = a_c / part_total
        q = n_c / global_total
        acc += p * math.log(p / q)
    return acc


def mi_bound_terms(counts):
    """The in-node and complement KL terms whose max bounds I(Y; S_w)."""
    if counts.node < 1:
        raise UndefinedNodeError("the bound needs a nonempty node")
    in_term = _kl_term(counts.node_per_class, counts.node,
                       counts.total_per_class, counts.total)
    out_term = _kl_term(counts.complement_per_class, counts.complement,
                        counts.total_per_class, counts.total)
    return in_term, out_term


def mi_upper_bound(counts):
    """Upper bound on the label information revealed by membership in a node.

    Exact mutual information is the node-probability-weighted average of the
    two KL terms; the max of the terms therefore dominates it.
    """
    return max(mi_bound_terms(counts))


def mi_upper_bound_batch(node_per_class, total_per_class, total):
    """Vectorized mi_upper_bound over many candidate nodes at once.

    Args:
        node_per_class: (k, class_count) int array, one row per node.
        total_per_class: (class_count,) population class counts.
        total: population size.

    Returns:
        (k,) float array matching mi_upper_bound row by row.
    """
    node = np.asarray(node_per_class, dtype=np.float64)
    totals = np.asarray(total_per_class, dtype=np.float64)
    sizes = node.sum(axis=1)
    if np.any(sizes == 0):
        raise UndefinedNodeError("a node with no members has no bound")
    q = totals / total

    def term(counts, counts_total):
        with np.errstate(invalid="ignore", divide="ignore"):
            p = counts / counts_total[:, None]
            logs = np.log(np.where(p > 0, p, 1.0) / np.where(q > 0, q, 1.0))
        vals = np.where(p > 0, p * logs, 0.0)
        out = vals.sum(axis=1)
        return np.where(counts_total > 0, out, 0.0)

    comp = totals[None, :] - node
    return np.maximum(term(node, sizes), term(comp, total - sizes))


def admissible(counts, xi):
    """True iff disclosing this instance space stays within the budget xi."""
    if xi < 0:
        raise ValueError("xi must be non-negative")
    return mi_upper_bound(counts) <= xi


def children_admissible(labels, left_ids, right_ids, class_count, xi,
                        total_per_class=None):
    """Both children of a candidate split pass the admissibility test."""
    left = counts_for_space(labels, left_ids, class_count, total_per_class)
    right = counts_for_space(labels, right_ids, class_count, total_per_class)
    return admissible(left, xi) and admissible(right, xi)


@dataclass
class PurityMessage:
    """One candidate's encrypted class sums plus the public counts needed to
    turn them into means after decryption."""

    left_sums: list
    right_sums: list
    comp_left_sums: list
    comp_right_sums: list
    left_count: int
    right_count: int
    total_count: int

    @property
    def ciphertext_count(self):
        return (len(self.left_sums) + len(self.right_sums)
                + len(self.comp_left_sums) + len(self.comp_right_sums))


def encrypt_onehot_labels(keypair, labels, class_count):
    """The active party's one-time broadcast: Enc(1[y_i == c]) for all i, c."""
    from .paillier import he_encrypt
    labels = np.asarray(labels, dtype=np.int64)
    return [[he_encrypt(keypair, 1 if labels[i] == c else 0)
             for c in range(class_count)] for i in range(len(labels))]


def secure_node_purity(candidate_spaces, enc_labels, pub):
    """Feature-party side of the purity exchange.

    For each candidate (left_ids, right_ids) this homomorphically sums the
    encrypted one-hot labels over the left space, the right space, and both
    complements relative to the full id universe, returning raw encrypted
    sums plus public counts. Reciprocal scaling happens after decryption so
    every wire value stays an integer.
    """
    n = len(enc_labels)
    class_count = len(enc_labels[0]) if n else 0
    all_ids = np.arange(n, dtype=np.int64)
    out = []
    for left_ids, right_ids in candidate_spaces:
        left_ids = np.asarray(left_ids, dtype=np.int64)
        right_ids = np.asarray(right_ids, dtype=np.int64)
        for ids in (left_ids, right_ids):
            if len(ids) and (ids.min() < 0 or ids.max() >= n):
                raise ProtocolError("candidate space references unknown sample ids")
        comp_left = np.setdiff1d(all_ids, left_ids, assume_unique=False)
        comp_right = np.setdiff1d(all_ids, right_ids, assume_unique=False)

        def sums(ids):
            return [he_sum(pub, (enc_labels[i][c] for i in ids))
                    for c in range(class_count)]

        out.append(PurityMessage(
            left_sums=sums(left_ids), right_sums=sums(right_ids),
            comp_left_sums=sums(comp_left), comp_right_sums=sums(comp_right),
            left_count=len(left_ids), right_count=len(right_ids), total_count=n))
    return out


def decrypt_purity(keypair, message):
    """Active-party side: decrypt a PurityMessage into four class-mean vectors."""
    def means(cts, count):
        raw = np.asarray([he_decrypt(keypair, ct) for ct in cts], dtype=np.float64)
        return raw / count if count else np.zeros_like(raw)

    return {
        "left": means(message.left_sums, message.left_count),
        "right": means(message.right_sums, message.right_count),
        "comp_left": means(message.comp_left_sums,
                           message.total_count - message.left_count),
        "comp_right": means(message.comp_right_sums,
                            message.total_count - message.right_count),
    }
