"""Density-based hierarchical clustering with outliers.

The agreed pipeline: per-point core distances (distance to the
``min_samples``-th nearest *other* point), mutual-reachability distances
``max(core_a, core_b, d(a, b))``, a minimum spanning tree over that implicit
graph (vectorized Prim, O(n^2) time / O(n) extra memory), single-linkage
dendrogram, a condensed tree pruned at ``min_cluster_size``, cluster
stability as the sum over member points of ``lambda_leave - lambda_birth``
with ``lambda = 1 / distance``, and excess-of-mass cluster selection (the
root is never selectable; if nothing below it survives, the root becomes a
single flagged fallback cluster so a successful fit always yields K >= 1).

Exemplars of a selected cluster are the maximum-lambda points of each of its
descendant leaf clusters — the most "durable" members, used downstream to
assign non-fit points by nearest-exemplar distance.
"""

from __future__ import annotations

import logging
from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

#: zero-distance guard: lambda = 1 / max(distance, _MIN_DIST) keeps the
#: stability arithmetic finite when > min_samples points coincide
_MIN_DIST = 1e-15


def core_distances(points: np.ndarray, min_samples: int) -> np.ndarray:
    """Distance from each point to its ``min_samples``-th nearest other point.

    The query includes the point itself at rank zero, so the k-th other
    point is found at rank ``min_samples`` of a ``min_samples + 1`` query.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if min_samples < 1:
        raise ConfigError(f"min_samples must be >= 1, got {min_samples}")
    if n <= min_samples:
        raise DataError(f"need more than min_samples={min_samples} points, got {n}")
    tree = cKDTree(points)
    dists, _ = tree.query(points, k=min_samples + 1)
    return np.ascontiguousarray(dists[:, -1])


def mutual_reachability_mst(points: np.ndarray, core: np.ndarray) -> np.ndarray:
    """Minimum spanning tree of the mutual-reachability graph.

    Prim's algorithm over the implicit complete graph with
    ``d_mr(a, b) = max(core_a, core_b, ||x_a - x_b||)``; one distance row is
    materialized per step, never the full matrix.  Returns ``(n-1, 3)`` rows
    ``[a, b, weight]``.
    """
    points = np.asarray(points, dtype=np.float64)
    core = np.asarray(core, dtype=np.float64)
    n = points.shape[0]
    if n < 2:
        raise DataError("need at least 2 points for a spanning tree")
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    best_from = np.zeros(n, dtype=np.int64)
    edges = np.empty((n - 1, 3))
    current = 0
    in_tree[0] = True
    for step in range(n - 1):
        delta = points - points[current]
        dist = np.sqrt(np.einsum("ij,ij->i", delta, delta))
        mr = np.maximum(np.maximum(core, core[current]), dist)
        better = ~in_tree & (mr < best)
        best[better] = mr[better]
        best_from[better] = current
        masked = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(masked))
        edges[step, 0] = best_from[nxt]
        edges[step, 1] = nxt
        edges[step, 2] = best[nxt]
        in_tree[nxt] = True
        current = nxt
    return edges


def single_linkage(edges: np.ndarray, n: int) -> np.ndarray:
    """Single-linkage dendrogram from MST edges (union-find).

    Returns ``(n-1, 4)`` rows ``[child_a, child_b, distance, size]`` where
    node ids < n are points and node ``n + i`` is created by row ``i``.
    """
    order = np.argsort(edges[:, 2], kind="stable")
    parent = list(range(2 * n - 1))
    size = [1] * n + [0] * (n - 1)
    out = np.empty((n - 1, 4))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    nxt = n
    for i, e in enumerate(order):
        a = find(int(edges[e, 0]))
        b = find(int(edges[e, 1]))
        out[i, 0] = a
        out[i, 1] = b
        out[i, 2] = edges[e, 2]
        out[i, 3] = size[a] + size[b]
        parent[a] = parent[b] = nxt
        size[nxt] = size[a] + size[b]
        nxt += 1
    return out


@dataclass
class CondensedTree:
    """Pruned cluster hierarchy.

    Row ``j`` says: ``child[j]`` (a point if < n, else a cluster) left or
    split from cluster ``parent[j]`` at density ``lam[j]``, carrying
    ``size[j]`` points.  Cluster ids start at ``n`` (the root is ``n``).
    """

    parent: np.ndarray
    child: np.ndarray
    lam: np.ndarray
    size: np.ndarray
    n_points: int

    @property
    def root(self) -> int:
        return self.n_points


def condense_tree(dendrogram: np.ndarray, n: int, min_cluster_size: int) -> CondensedTree:
    """Collapse the dendrogram into clusters of at least ``min_cluster_size``.

    Walking down from the root, a split where both sides reach
    ``min_cluster_size`` creates two new clusters; smaller sides dissolve
    into their parent cluster as point departures at the split's lambda.
    """
    if min_cluster_size < 2:
        raise ConfigError(f"min_cluster_size must be >= 2, got {min_cluster_size}")
    left = dendrogram[:, 0].astype(np.int64)
    right = dendrogram[:, 1].astype(np.int64)
    dist = dendrogram[:, 2]
    node_size = np.concatenate([np.ones(n, dtype=np.int64), dendrogram[:, 3].astype(np.int64)])

    def subtree_points(node: int) -> list[int]:
        stack = [node]
        pts = []
        while stack:
            x = stack.pop()
            if x < n:
                pts.append(x)
            else:
                stack.append(int(left[x - n]))
                stack.append(int(right[x - n]))
        return pts

    root = 2 * n - 2
    relabel = {root: n}
    next_label = n + 1
    parents: list[int] = []
    children: list[int] = []
    lams: list[float] = []
    sizes: list[int] = []

    def emit(parent: int, child: int, lam: float, size: int) -> None:
        parents.append(parent)
        children.append(child)
        lams.append(lam)
        sizes.append(size)

    queue: deque[int] = deque([root])
    while queue:
        node = queue.popleft()
        i = node - n
        lam = 1.0 / max(float(dist[i]), _MIN_DIST)
        label = relabel[node]
        l, r = int(left[i]), int(right[i])
        l_big = node_size[l] >= min_cluster_size
        r_big = node_size[r] >= min_cluster_size
        if l_big and r_big:
            for side in (l, r):
                relabel[side] = next_label
                emit(label, next_label, lam, int(node_size[side]))
                next_label += 1
                queue.append(side)
        elif not l_big and not r_big:
            for p in subtree_points(l):
                emit(label, p, lam, 1)
            for p in subtree_points(r):
                emit(label, p, lam, 1)
        else:
            small, big = (l, r) if not l_big else (r, l)
            relabel[big] = label
            if big >= n:
                queue.append(big)
            else:  # a single point continuing a cluster cannot happen with
                emit(label, big, lam, 1)  # min_cluster_size >= 2, but stay safe
            for p in subtree_points(small):
                emit(label, p, lam, 1)

    return CondensedTree(
        parent=np.asarray(parents, dtype=np.int64),
        child=np.asarray(children, dtype=np.int64),
        lam=np.asarray(lams, dtype=np.float64),
        size=np.asarray(sizes, dtype=np.int64),
        n_points=n,
    )


def compute_stability(tree: CondensedTree) -> dict[int, float]:
    """Excess-of-mass stability: sum over rows of (lambda - birth) * size,
    where a cluster's birth is the lambda at which it split off (root: 0)."""
    births: dict[int, float] = {tree.root: 0.0}
    cluster_mask = tree.child >= tree.n_points
    for c, lam in zip(tree.child[cluster_mask], tree.lam[cluster_mask]):
        births[int(c)] = float(lam)
    stability: dict[int, float] = defaultdict(float)
    for p, lam, size in zip(tree.parent, tree.lam, tree.size):
        stability[int(p)] += (float(lam) - births[int(p)]) * int(size)
    for c in births:
        stability.setdefault(c, 0.0)
    return dict(stability)


def select_eom(tree: CondensedTree, stability: dict[int, float]) -> tuple[list[int], bool]:
    """Excess-of-mass cluster selection.

    Working leaves-upward, a cluster is kept when its own stability beats the
    sum of its (recursively propagated) children's; keeping it deselects its
    whole subtree.  The root is excluded; if nothing else gets selected the
    root is returned as a single fallback cluster (flag True).
    """
    children: dict[int, list[int]] = defaultdict(list)
    cluster_mask = tree.child >= tree.n_points
    for p, c in zip(tree.parent[cluster_mask], tree.child[cluster_mask]):
        children[int(p)].append(int(c))
    candidates = sorted(set(stability) - {tree.root}, reverse=True)
    selected: dict[int, bool] = {}
    propagated: dict[int, float] = {}
    for c in candidates:
        own = stability[c]
        subtree = sum(propagated[x] for x in children[c])
        if children[c] and subtree > own:
            selected[c] = False
            propagated[c] = subtree
        else:
            selected[c] = True
            propagated[c] = own
            stack = list(children[c])
            while stack:
                d = stack.pop()
                selected[d] = False
                stack.extend(children[d])
    chosen = sorted(c for c, keep in selected.items() if keep)
    if chosen:
        return chosen, False
    logger.warning("no cluster beat the root; falling back to a single low-stability root cluster")
    return [tree.root], True


@dataclass
class DensityFit:
    """Result of one density clustering fit over n points."""

    labels: np.ndarray  # (n,) int32; -1 = outlier
    n_clusters: int
    exemplars: list[np.ndarray]  # per-cluster point indices
    stability: np.ndarray  # per-cluster
    core_dists: np.ndarray  # (n,)
    max_core: np.ndarray  # per-cluster max member core distance
    fallback: bool
    condensed: CondensedTree


def fit(points: np.ndarray, min_samples: int = 10, min_cluster_size: int = 50) -> DensityFit:
    """Full clustering pass over ``points`` (rows are observations)."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < min_cluster_size:
        raise DataError(f"need at least min_cluster_size={min_cluster_size} points, got {n}")
    core = core_distances(points, min_samples)
    edges = mutual_reachability_mst(points, core)
    dendro = single_linkage(edges, n)
    tree = condense_tree(dendro, n, min_cluster_size)
    stability = compute_stability(tree)
    chosen, fallback = select_eom(tree, stability)

    renumber = {c: i for i, c in enumerate(chosen)}
    selected_set = set(chosen)
    parent_of: dict[int, int] = {}
    children: dict[int, list[int]] = defaultdict(list)
    cluster_mask = tree.child >= n
    for p, c in zip(tree.parent[cluster_mask], tree.child[cluster_mask]):
        parent_of[int(c)] = int(p)
        children[int(p)].append(int(c))

    # selected ancestor (selected clusters form an antichain) with memoization
    anc_memo: dict[int, int] = {}

    def selected_ancestor(c: int) -> int:
        path = []
        x = c
        result = -1
        while True:
            if x in anc_memo:
                result = anc_memo[x]
                break
            if x in selected_set:
                result = x
                break
            nxt = parent_of.get(x)
            path.append(x)
            if nxt is None:
                break
            x = nxt
        anc_memo[x] = result
        for y in path:
            anc_memo[y] = result
        return result

    point_mask = ~cluster_mask
    pt_child = tree.child[point_mask]
    pt_parent = tree.parent[point_mask]
    pt_lam = tree.lam[point_mask]

    labels = np.full(n, -1, dtype=np.int32)
    for p, owner in zip(pt_child, pt_parent):
        anc = selected_ancestor(int(owner))
        if anc >= 0:
            labels[int(p)] = renumber[anc]

    # exemplars: max-lambda points of each descendant leaf cluster
    by_parent: dict[int, list[int]] = defaultdict(list)
    for j, owner in enumerate(pt_parent):
        by_parent[int(owner)].append(j)
    exemplars: list[np.ndarray] = []
    for c in chosen:
        leaves = []
        stack = [c]
        while stack:
            x = stack.pop()
            kids = children[x]
            if kids:
                stack.extend(kids)
            else:
                leaves.append(x)
        ex: list[int] = []
        for leaf in sorted(leaves):
            rows = by_parent.get(leaf, [])
            if not rows:
                continue
            lams = pt_lam[rows]
            peak = lams.max()
            ex.extend(int(pt_child[j]) for j in rows if pt_lam[j] == peak)
        exemplars.append(np.array(sorted(ex), dtype=np.int64))

    max_core = np.zeros(len(chosen))
    for k in range(len(chosen)):
        members = labels == k
        if members.any():
            max_core[k] = float(core[members].max())
    stab = np.array([stability[c] for c in chosen])
    return DensityFit(
        labels=labels,
        n_clusters=len(chosen),
        exemplars=exemplars,
        stability=stab,
        core_dists=core,
        max_core=max_core,
        fallback=fallback,
        condensed=tree,
    )
