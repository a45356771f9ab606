"""Label inference from one party's observation transcript.

The pipeline turns co-membership of training rows in observed instance
spaces into a weighted graph, groups the vertices into communities, then
clusters the party's own feature slice with the community memberships
appended as extra columns. Baselines: plain feature clustering (CL),
union-find over co-membership (UNI), and UNI's components as extra
clustering features (UNI+CL). Everything here reads only the transcript and
the attacking party's local columns.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .datasets import minmax_normalize
from .trees import RANDOM_FOREST, XGBOOST


class InvalidKError(ValueError):
    pass


@dataclass
class AttackParams:
    """Knobs for the graph attack; defaults follow the evaluation setup."""

    eta: float = 1.0          # per-tree discount, weight eta**(t-1) for rank-t tree
    alpha: float = 3.0        # scale of the community one-hot block
    chunk_size: int = 1000    # leaves at least this large get the chunked build
    chunk_weight: float = 100.0
    use_chunked: bool = True
    seed: int = 0
    kmeans_max_iter: int = 300
    kmeans_tol: float = 1e-4
    louvain_max_iter: int = 100
    louvain_tol: float = 1e-6
    include_internal_spaces: bool = False  # UNI sensitivity flag

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.chunk_size < 2 or self.chunk_weight <= 0:
            raise ValueError("chunk_size must be >= 2 and chunk_weight > 0")

    @classmethod
    def for_model(cls, model_kind, **kw):
        eta = {RANDOM_FOREST: 1.0, XGBOOST: 0.6}[model_kind]
        return cls(eta=eta, **kw)


@dataclass
class AttackerView:
    """Instance spaces one party legitimately knows, grouped per tree.

    Trees are kept in the order the party first observed them; within a
    tree an attacker-leaf is a known space with no known proper subset,
    which generally differs from the model's true leaves.
    """

    n: int
    trees: list  # [(tree_key, [frozenset of ids, ...]), ...] observation order
    _leaf_cache: list = field(default=None, repr=False, compare=False)

    def _unique(self, spaces):
        return sorted(set(spaces), key=lambda s: (len(s), sorted(s)))

    def attacker_leaves(self):
        """Per tree (observation rank order): minimal known spaces."""
        if self._leaf_cache is not None:
            return self._leaf_cache
        out = []
        for key, spaces in self.trees:
            uniq = self._unique(spaces)
            members = np.zeros((len(uniq), self.n), dtype=np.int32)
            for i, s in enumerate(uniq):
                members[i, list(s)] = 1
            sizes = members.sum(axis=1)
            # contains[i, j]: space i lies inside space j
            contains = (members @ (1 - members.T)) == 0
            covered = (contains & (sizes[:, None] < sizes[None, :])).any(axis=0)
            leaves = [np.fromiter(sorted(s), dtype=np.int64)
                      for s, c in zip(uniq, covered) if not c]
            out.append((key, leaves))
        self._leaf_cache = out
        return out

    def known_spaces(self):
        """All known spaces per tree, minus any covering every id the party
        ever saw in that tree (the root broadcast carries no signal)."""
        out = []
        for key, spaces in self.trees:
            uniq = self._unique(spaces)
            if uniq:
                top = max(len(s) for s in uniq)
                uniq = [s for s in uniq if len(s) < top]
            out.append((key, [np.fromiter(sorted(s), dtype=np.int64)
                              for s in uniq]))
        return out


def attacker_view_from_transcript(transcript):
    """Collect the spaces a party saw: broadcast nodes plus both children of
    every split it owned."""
    per_tree = {}
    order = []
    for e in transcript.events:
        if e.kind == "broadcast":
            groups = [e.space]
        elif e.kind == "owned_split":
            groups = [e.left, e.right]
        else:
            continue
        if e.tree_id not in per_tree:
            per_tree[e.tree_id] = []
            order.append(e.tree_id)
        for ids in groups:
            per_tree[e.tree_id].append(frozenset(int(i) for i in ids))
    return AttackerView(n=transcript.n_train,
                        trees=[(t, per_tree[t]) for t in order])


def attacker_view_from_model(model):
    """View of a party holding a finished model dump: every true leaf."""
    trees = []
    n = 0
    for tree in model.trees:
        spaces = [frozenset(int(i) for i in leaf.instance_space)
                  for leaf in tree.leaves()]
        n = max(n, len(tree.root.instance_space))
        trees.append((tree.tree_id, spaces))
    return AttackerView(n=n, trees=trees)


@dataclass
class AdjacencyGraph:
    """Symmetric nonnegative weights over training rows, zero diagonal."""

    n: int
    matrix: sparse.csr_matrix
    build_params: dict = field(default_factory=dict)

    @property
    def edge_count(self):
        return self.matrix.nnz // 2

    def edge_dict(self):
        """{(i, j) with i < j: weight}; test-friendly view."""
        coo = self.matrix.tocoo()
        out = {}
        for i, j, w in zip(coo.row, coo.col, coo.data):
            if i < j and w != 0:
                out[(int(i), int(j))] = float(w)
        return out


def _complete_edges(ids, weight, rows, cols, data):
    k = len(ids)
    if k < 2:
        return
    r = np.repeat(ids, k)
    c = np.tile(ids, k)
    keep = r != c
    rows.append(r[keep])
    cols.append(c[keep])
    data.append(np.full(keep.sum(), weight))


def _edge(i, j, weight, rows, cols, data):
    rows.append(np.asarray([i, j], dtype=np.int64))
    cols.append(np.asarray([j, i], dtype=np.int64))
    data.append(np.asarray([weight, weight]))


def _assemble(n, rows, cols, data, params):
    if rows:
        m = sparse.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n)).tocsr()
        m.sum_duplicates()
    else:
        m = sparse.csr_matrix((n, n))
    return AdjacencyGraph(n=n, matrix=m, build_params=params)


def build_adjacency(view, eta):
    """Exact co-membership graph: every pair inside the rank-t tree's
    attacker-leaves gains eta**(t-1); weights add across trees."""
    if not 0.0 < eta <= 1.0:
        raise ValueError("eta must lie in (0, 1]")
    rows, cols, data = [], [], []
    for t, (_, leaves) in enumerate(view.attacker_leaves(), start=1):
        w = eta ** (t - 1)
        for ids in leaves:
            _complete_edges(ids, w, rows, cols, data)
    return _assemble(view.n, rows, cols, data, {"eta": eta, "chunked": False})


def build_adjacency_chunked(view, eta, chunk_size, chunk_weight):
    """Memory-bounded variant: a leaf smaller than chunk_size contributes its
    exact complete subgraph; a larger leaf is cut into consecutive runs of
    chunk_size sorted ids, each run fully connected at eta**(t-1), with one
    heavy edge of weight chunk_weight joining the last id of each run to the
    first id of the next."""
    if chunk_size < 2 or chunk_weight <= 0:
        raise ValueError("chunk_size must be >= 2 and chunk_weight > 0")
    rows, cols, data = [], [], []
    for t, (_, leaves) in enumerate(view.attacker_leaves(), start=1):
        w = eta ** (t - 1)
        for ids in leaves:
            if len(ids) < chunk_size:
                _complete_edges(ids, w, rows, cols, data)
                continue
            chunks = [ids[p:p + chunk_size]
                      for p in range(0, len(ids), chunk_size)]
            for chunk in chunks:
                _complete_edges(chunk, w, rows, cols, data)
            for p in range(len(chunks) - 1):
                _edge(int(chunks[p][-1]), int(chunks[p + 1][0]), chunk_weight,
                      rows, cols, data)
    return _assemble(view.n, rows, cols, data,
                     {"eta": eta, "chunked": True, "chunk_size": chunk_size,
                      "chunk_weight": chunk_weight})


@dataclass
class CommunityAssignment:
    labels: np.ndarray  # dense 0-based community per vertex
    modularity: float
    passes: int
    q_history: list = field(default_factory=list)

    @property
    def community_count(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def modularity(graph, labels):
    """Q = sum_c [ in_c/(2m) - (tot_c/(2m))^2 ] with 2m the ordered-pair
    total weight; zero-weight graphs score 0."""
    a = graph.matrix
    two_m = a.sum()
    if two_m == 0:
        return 0.0
    coo = a.tocoo()
    same = labels[coo.row] == labels[coo.col]
    k = labels.max() + 1
    internal = np.bincount(labels[coo.row[same]], weights=coo.data[same],
                           minlength=k)
    degrees = np.asarray(a.sum(axis=1)).ravel()
    tot = np.bincount(labels, weights=degrees, minlength=k)
    return float((internal / two_m - (tot / two_m) ** 2).sum())


def _dense_relabel(labels):
    out = np.empty_like(labels)
    mapping = {}
    for i, c in enumerate(labels):
        if c not in mapping:
            mapping[c] = len(mapping)
        out[i] = mapping[c]
    return out


def _local_moving(a, two_m, tol, init=None):
    """One phase of greedy vertex moves, ascending id sweeps; returns the
    per-vertex community and whether anything moved. init seeds the sweep
    with an existing assignment instead of singletons."""
    n = a.shape[0]
    indptr, indices, data = a.indptr, a.indices, a.data
    degree = np.asarray(a.sum(axis=1)).ravel()
    comm = np.arange(n) if init is None else np.asarray(init).copy()
    tot = np.bincount(comm, weights=degree, minlength=n)
    moved_any = False
    while True:
        moved = False
        for i in range(n):
            start, end = indptr[i], indptr[i + 1]
            links = {}
            for j, w in zip(indices[start:end], data[start:end]):
                if j == i:
                    continue  # a self-loop is not a neighbor link
                cj = comm[j]
                links[cj] = links.get(cj, 0.0) + w
            old = comm[i]
            tot[old] -= degree[i]
            # gain of joining c (up to the common positive factor 2/(2m)):
            # links[c] - tot[c] * k_i / (2m)
            best_c, best_g = old, links.get(old, 0.0) - tot[old] * degree[i] / two_m
            for c in sorted(links):
                if c == old:
                    continue
                g = links[c] - tot[c] * degree[i] / two_m
                if g > best_g + 1e-15 or (g == best_g and c < best_c):
                    best_c, best_g = c, g
            stay_g = links.get(old, 0.0) - tot[old] * degree[i] / two_m
            if best_c != old and (best_g - stay_g) * 2.0 / two_m > tol:
                comm[i] = best_c
                moved = True
                moved_any = True
            tot[comm[i]] += degree[i]
        if not moved:
            break
    return _dense_relabel(comm), moved_any


def _aggregate(a, comm):
    k = comm.max() + 1
    coo = a.tocoo()
    m = sparse.coo_matrix((coo.data, (comm[coo.row], comm[coo.col])),
                          shape=(k, k)).tocsr()
    m.sum_duplicates()
    return m


_EXACT_VERTEX_LIMIT = 8


def _exhaustive_best(graph):
    """Highest-Q partition by enumerating restricted-growth strings; ties go
    to the first (lexicographically smallest) string. Only viable for tiny
    graphs: the count grows as the Bell numbers."""
    n = graph.n
    labels = np.zeros(n, dtype=np.int64)
    best_q, best = modularity(graph, labels), labels.copy()

    def rec(i, max_used):
        nonlocal best_q, best
        if i == n:
            q = modularity(graph, labels)
            if q > best_q + 1e-15:
                best_q, best = q, labels.copy()
            return
        for c in range(max_used + 2):
            labels[i] = c
            rec(i + 1, max(max_used, c))
        labels[i] = 0

    if n > 1:
        rec(1, 0)
    return best, best_q


def louvain(graph, max_iter=100, tol=1e-6):
    """Two-phase community detection: greedy local moving, then community
    aggregation, repeated until a phase moves nothing, closed by one more
    vertex-level sweep over the original graph so no single-vertex move is
    left on the table. Graphs small enough to enumerate get the exact
    maximum-Q partition instead; the greedy phases cannot guarantee that
    (they never split a formed community). The final score is always
    evaluated on the original graph."""
    n = graph.n
    two_m = graph.matrix.sum()
    if two_m == 0:
        return CommunityAssignment(labels=np.arange(n), modularity=0.0,
                                   passes=0)
    if n <= _EXACT_VERTEX_LIMIT:
        labels, q = _exhaustive_best(graph)
        return CommunityAssignment(labels=_dense_relabel(labels),
                                   modularity=q, passes=1, q_history=[q])
    current = graph.matrix
    mapping = np.arange(n)
    history = []
    passes = 0
    for _ in range(max_iter):
        comm, moved = _local_moving(current, two_m, tol)
        passes += 1
        mapping = comm[mapping]
        history.append(modularity(graph, mapping))
        if not moved:
            break
        current = _aggregate(current, comm)
    labels = _dense_relabel(mapping)
    refined, polished = _local_moving(graph.matrix, two_m, tol, init=labels)
    if polished:
        labels = refined
        passes += 1
        history.append(modularity(graph, labels))
    return CommunityAssignment(labels=labels, modularity=modularity(graph, labels),
                               passes=passes, q_history=history)


@dataclass
class ClusterResult:
    assignment: np.ndarray
    method: str
    cluster_count: int
    iterations: int = 0
    modularity: float = None
    params: dict = field(default_factory=dict)

    def summary_dict(self):
        d = {"method": self.method, "cluster_count": self.cluster_count,
             "iterations": self.iterations, "params": self.params}
        if self.modularity is not None:
            d["modularity"] = self.modularity
        return d

    def assignment_csv(self):
        lines = ["sample_id,cluster"]
        lines += [f"{i},{int(c)}" for i, c in enumerate(self.assignment)]
        return "\n".join(lines) + "\n"


def _kmeans_pp_init(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    d2 = np.square(x - centers[0]).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = x[idx]
        d2 = np.minimum(d2, np.square(x - centers[j]).sum(axis=1))
    return centers


def kmeans(x, k, seed, max_iter=300, tol=1e-4, n_init=1):
    """Best of n_init Lloyd runs from kmeans++ starts, by final inertia.

    Each run stops when the relative Frobenius shift of the center matrix
    drops to tol or at max_iter. An emptied cluster is re-seeded with the
    point farthest from its assigned center.

    Returns:
        (labels, centers, iterations_used) of the lowest-inertia run.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k > n:
        raise InvalidKError(f"cannot form {k} clusters from {n} points")
    if k < 1:
        raise InvalidKError("need at least one cluster")
    if n_init < 1:
        raise InvalidKError("need at least one initialization")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        run = _kmeans_once(x, k, rng, max_iter, tol)
        if best is None or run[3] < best[3]:
            best = run
    return best[0], best[1], best[2]


def _kmeans_once(x, k, rng, max_iter, tol):
    n = x.shape[0]
    centers = _kmeans_pp_init(x, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        d2 = (np.square(x).sum(axis=1)[:, None] - 2.0 * (x @ centers.T)
              + np.square(centers).sum(axis=1)[None, :])
        labels = np.argmin(d2, axis=1)
        for empty in range(k):
            if not np.any(labels == empty):
                assigned = d2[np.arange(n), labels]
                far = int(np.argmax(assigned))
                labels[far] = empty
                centers[empty] = x[far]
                d2[far] = np.square(x[far] - centers).sum(axis=1)[None, :]
        new_centers = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
        denom = np.linalg.norm(centers)
        shift = np.linalg.norm(new_centers - centers) / (denom if denom > 0 else 1.0)
        centers = new_centers
        if shift <= tol:
            break
    inertia = float(np.square(x - centers[labels]).sum())
    return labels, centers, iterations, inertia


def kmeans_block(local_features, communities, alpha, k, seed, max_iter=300,
                 tol=1e-4):
    """K-means over [normalized features | alpha * community one-hot].

    Single-member communities carry no co-occurrence evidence, so their
    columns are dropped: such rows keep an all-zero community block instead
    of a private axis that would only push them away from everything else.
    """
    xbar = minmax_normalize(local_features)
    omega = np.zeros((xbar.shape[0], communities.community_count))
    omega[np.arange(len(communities.labels)), communities.labels] = 1.0
    shared = omega.sum(axis=0) > 1
    block = np.hstack([xbar, alpha * omega[:, shared]])
    return kmeans(block, k, seed, max_iter=max_iter, tol=tol)


def attack_cl(local_features, class_count, seed, max_iter=300, tol=1e-4):
    """Baseline: K-means on the attacker's normalized features alone."""
    xbar = minmax_normalize(local_features)
    labels, _, iters = kmeans(xbar, class_count, seed, max_iter=max_iter, tol=tol)
    return ClusterResult(assignment=labels, method="cl",
                         cluster_count=class_count, iterations=iters,
                         params={"seed": seed})


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def attack_uni(view, include_internal=False):
    """Baseline: rows sharing any attacker-leaf belong together; connected
    components become clusters. include_internal widens co-membership to all
    known non-root spaces (sensitivity analysis)."""
    uf = _UnionFind(view.n)
    groups = view.known_spaces() if include_internal else view.attacker_leaves()
    for _, spaces in groups:
        for ids in spaces:
            for other in ids[1:]:
                uf.union(int(ids[0]), int(other))
    roots = np.asarray([uf.find(i) for i in range(view.n)])
    labels = _dense_relabel(roots)
    return ClusterResult(assignment=labels, method="uni",
                         cluster_count=int(labels.max()) + 1,
                         params={"include_internal": include_internal})


def attack_uni_cl(view, local_features, class_count, seed, max_iter=300,
                  tol=1e-4):
    """Baseline: UNI component one-hots appended unscaled to the features."""
    uni = attack_uni(view)
    xbar = minmax_normalize(local_features)
    onehot = np.zeros((view.n, uni.cluster_count))
    onehot[np.arange(view.n), uni.assignment] = 1.0
    labels, _, iters = kmeans(np.hstack([xbar, onehot]), class_count, seed,
                              max_iter=max_iter, tol=tol)
    return ClusterResult(assignment=labels, method="uni_cl",
                         cluster_count=class_count, iterations=iters,
                         params={"seed": seed})


def attack_id2graph(transcript, local_features, class_count, params):
    """The full pipeline: adjacency from the transcript, communities from
    the graph, K-means over features plus scaled community one-hots.

    A graph with no edges at all carries no co-membership signal; the
    community block is dropped and the result coincides with attack_cl on
    the same seed.
    """
    view = attacker_view_from_transcript(transcript)
    if params.use_chunked:
        graph = build_adjacency_chunked(view, params.eta, params.chunk_size,
                                        params.chunk_weight)
    else:
        graph = build_adjacency(view, params.eta)
    meta = {"eta": params.eta, "alpha": params.alpha, "seed": params.seed,
            **graph.build_params}
    if graph.matrix.nnz == 0:
        base = attack_cl(local_features, class_count, params.seed,
                         max_iter=params.kmeans_max_iter, tol=params.kmeans_tol)
        return ClusterResult(assignment=base.assignment, method="id2graph",
                             cluster_count=class_count,
                             iterations=base.iterations, modularity=0.0,
                             params={**meta, "graph_empty": True})
    communities = louvain(graph, max_iter=params.louvain_max_iter,
                          tol=params.louvain_tol)
    labels, _, iters = kmeans_block(local_features, communities, params.alpha,
                                    class_count, params.seed,
                                    max_iter=params.kmeans_max_iter,
                                    tol=params.kmeans_tol)
    return ClusterResult(assignment=labels, method="id2graph",
                         cluster_count=class_count, iterations=iters,
                         modularity=communities.modularity, params=meta)
