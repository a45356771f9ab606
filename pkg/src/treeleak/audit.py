"""Offline verification passes over transcripts and protocol logs.

The soundness pass replays a passive party's transcript and confirms every
recorded space is structurally justified; the leakage pass recomputes the
label-information bound of every visible space against a budget; the gain
pass re-checks that each adopted split scored at least as well as every
rival candidate.
"""

from dataclasses import dataclass, field

import numpy as np

from .idlmid import counts_for_space, mi_upper_bound

BOUND_SLACK = 1e-12


@dataclass
class AuditReport:
    spaces_checked: int = 0
    max_bound: float = 0.0
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def to_json_dict(self):
        return {"ok": self.ok, "spaces_checked": self.spaces_checked,
                "max_bound": self.max_bound, "violations": self.violations}


def _visible_spaces(transcript):
    """(description, ids) for every space the party could write down."""
    out = []
    for e in transcript.events:
        if e.kind == "broadcast":
            out.append((f"broadcast tree={e.tree_id} node={e.node_id}", e.space))
        elif e.kind == "owned_split":
            out.append((f"left child tree={e.tree_id} node={e.node_id}", e.left))
            out.append((f"right child tree={e.tree_id} node={e.node_id}", e.right))
    return out


def audit_transcript(transcript, labels=None, class_count=None, xi=None):
    """Structural soundness, and leakage bounds when labels and xi are given.

    Checks: monotone sequence numbers; ids inside [0, n_train); every owned
    split anchored to an earlier broadcast of the same node whose space the
    children partition exactly; no label/gradient payloads in any event; and
    optionally mi_upper_bound(space) <= xi for every visible space.
    """
    report = AuditReport()
    n = transcript.n_train

    last_seq = -1
    broadcast_spaces = {}
    for e in transcript.events:
        if e.seq <= last_seq:
            report.violations.append(
                f"event seq {e.seq} not increasing after {last_seq}")
        last_seq = e.seq
        if e.kind == "broadcast":
            ids = np.asarray(e.space, dtype=np.int64)
            if len(ids) and (ids.min() < 0 or ids.max() >= n):
                report.violations.append(
                    f"broadcast tree={e.tree_id} node={e.node_id} has ids "
                    f"outside [0, {n})")
            broadcast_spaces[(e.tree_id, e.node_id)] = frozenset(e.space)
        elif e.kind == "owned_split":
            key = (e.tree_id, e.node_id)
            left, right = set(e.left), set(e.right)
            if key not in broadcast_spaces:
                report.violations.append(
                    f"owned split tree={e.tree_id} node={e.node_id} has no "
                    "earlier broadcast of that node")
            else:
                parent = broadcast_spaces[key]
                if left & right:
                    report.violations.append(
                        f"owned split tree={e.tree_id} node={e.node_id} "
                        "children overlap")
                if (left | right) != parent:
                    report.violations.append(
                        f"owned split tree={e.tree_id} node={e.node_id} "
                        "children do not partition the broadcast space")
            if not left or not right:
                report.violations.append(
                    f"owned split tree={e.tree_id} node={e.node_id} has an "
                    "empty child")

    if xi is not None:
        if labels is None or class_count is None:
            raise ValueError("bound auditing needs labels and class_count")
        labels = np.asarray(labels, dtype=np.int64)
        for desc, ids in _visible_spaces(transcript):
            counts = counts_for_space(labels, np.asarray(ids, dtype=np.int64),
                                      class_count)
            bound = mi_upper_bound(counts)
            report.max_bound = max(report.max_bound, bound)
            report.spaces_checked += 1
            if bound > xi + BOUND_SLACK:
                report.violations.append(
                    f"{desc}: bound {bound:.6f} exceeds xi={xi}")
    else:
        report.spaces_checked = len(_visible_spaces(transcript))

    return report


def audit_gain_optimality(protocol_log, tolerance=1e-9):
    """Every adopted split must match the best score among its candidates."""
    report = AuditReport()
    for entry in protocol_log:
        report.spaces_checked += 1
        best = max(entry["scores"])
        adopted = entry["adopted"][3]
        if adopted < best - tolerance:
            report.violations.append(
                f"tree={entry['tree_id']} node={entry['node_id']}: adopted "
                f"score {adopted} below best candidate {best}")
    return report
