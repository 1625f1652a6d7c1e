"""User clustering in the latent diffusion space.

Users whose raw aggregated vector exceeds the fit threshold ``tau`` (an
activity/alignment scale) are clustered on their L2-normalized directions
with the density algorithm in :mod:`polarscope.density`; everyone else is
assigned afterwards by nearest cluster exemplar, admitted only within the
cluster's maximum member core distance — otherwise they stay outliers.
Outliers are first-class citizens throughout (label ``-1``).
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import density
from .errors import ConfigError, DataError
from .ingest import EventStore, UserIndex
from .spectral import UserVectors

logger = logging.getLogger(__name__)

#: provenance codes for assignment rows
PROVENANCE_FIT = 0
PROVENANCE_PREDICTED = 1
PROVENANCE_NAMES = {PROVENANCE_FIT: "fit", PROVENANCE_PREDICTED: "predicted"}


def default_min_cluster_size(n_fit: int) -> int:
    """Default pruning floor: max(50, 0.5% of the users being clustered)."""
    return max(50, int(round(0.005 * n_fit)))


@dataclass
class ClusterModel:
    """Fitted clustering: labels over the fit subset plus the exemplar
    geometry needed to assign everyone else."""

    n_clusters: int
    tau: float
    min_cluster_size: int
    min_samples: int
    fit_rows: np.ndarray  # user-table rows that were clustered
    fit_labels: np.ndarray  # same length; -1 = outlier
    exemplar_vectors: np.ndarray  # (E, k) unit vectors
    exemplar_clusters: np.ndarray  # (E,)
    admission_radius: np.ndarray  # (K,) max member core distance
    stability: np.ndarray  # (K,)
    fallback: bool

    @property
    def k(self) -> int:
        return self.n_clusters


def fit_clusters(
    vectors: UserVectors,
    tau: float = 10.0,
    min_cluster_size: int | None = None,
    min_samples: int = 10,
) -> ClusterModel:
    """Cluster the normalized vectors of users with raw norm > ``tau``.

    ``min_cluster_size`` defaults to ``max(50, 0.5%)`` of the fit subset.
    Raises :class:`DataError` when fewer than ``min_cluster_size`` users
    clear the threshold (**lower tau** to widen the fit subset).
    """
    if tau < 0:
        raise ConfigError(f"tau must be >= 0, got {tau}")
    fit_rows = np.flatnonzero(vectors.norms > tau)
    n_fit = int(fit_rows.shape[0])
    mcs = default_min_cluster_size(n_fit) if min_cluster_size is None else min_cluster_size
    if mcs < 2:
        raise ConfigError(f"min_cluster_size must be >= 2, got {mcs}")
    if n_fit < mcs:
        raise DataError(
            f"only {n_fit} users have norm > tau={tau}, fewer than min_cluster_size={mcs}; "
            f"lower tau to widen the fit subset"
        )
    points = vectors.unit[fit_rows]
    result = density.fit(points, min_samples=min_samples, min_cluster_size=mcs)
    exemplar_rows = []
    exemplar_clusters = []
    for k, ex in enumerate(result.exemplars):
        exemplar_rows.extend(int(e) for e in ex)
        exemplar_clusters.extend([k] * len(ex))
    exemplar_rows = np.asarray(exemplar_rows, dtype=np.int64)
    model = ClusterModel(
        n_clusters=result.n_clusters,
        tau=tau,
        min_cluster_size=mcs,
        min_samples=min_samples,
        fit_rows=fit_rows,
        fit_labels=result.labels.copy(),
        exemplar_vectors=points[exemplar_rows].copy(),
        exemplar_clusters=np.asarray(exemplar_clusters, dtype=np.int32),
        admission_radius=result.max_core.copy(),
        stability=result.stability.copy(),
        fallback=result.fallback,
    )
    sizes = np.bincount(result.labels[result.labels >= 0], minlength=result.n_clusters)
    logger.info(
        "fit %d clusters over %d users (tau=%g, mcs=%d): sizes %s, %d fit outliers%s",
        model.n_clusters,
        n_fit,
        tau,
        mcs,
        sizes.tolist(),
        int((result.labels < 0).sum()),
        " [fallback]" if result.fallback else "",
    )
    return model


@dataclass
class ClusterAssignment:
    """Labels for every user in the index (fit + predicted)."""

    labels: np.ndarray  # (n_users,) int32; -1 = outlier
    provenance: np.ndarray  # (n_users,) uint8, see PROVENANCE_*
    n_clusters: int

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels[self.labels >= 0], minlength=self.n_clusters)

    @property
    def n_outliers(self) -> int:
        return int((self.labels < 0).sum())

    def as_rows(self, users: list[str]):
        """Yield (user, cluster, provenance) rows, lexicographic by user id."""
        for i in range(len(users)):
            yield users[i], int(self.labels[i]), PROVENANCE_NAMES[int(self.provenance[i])]


def predict_clusters(
    model: ClusterModel,
    vectors: UserVectors,
    chunk: int = 8192,
) -> ClusterAssignment:
    """Assign every user: fit labels pass through; the rest go to the
    nearest exemplar's cluster when within its admission radius, else stay
    outliers.  Zero vectors (users seen in no usable window) are outliers."""
    n = vectors.n_users
    labels = np.full(n, -1, dtype=np.int32)
    provenance = np.full(n, PROVENANCE_PREDICTED, dtype=np.uint8)
    labels[model.fit_rows] = model.fit_labels
    provenance[model.fit_rows] = PROVENANCE_FIT

    is_fit = np.zeros(n, dtype=bool)
    is_fit[model.fit_rows] = True
    todo = np.flatnonzero(~is_fit & (vectors.norms > 0))
    ex = model.exemplar_vectors
    if ex.shape[0] == 0:
        logger.warning("model has no exemplars; every non-fit user stays an outlier")
        return ClusterAssignment(labels=labels, provenance=provenance, n_clusters=model.n_clusters)
    ex_sq = np.einsum("ij,ij->i", ex, ex)
    for lo in range(0, todo.shape[0], chunk):
        rows = todo[lo : lo + chunk]
        pts = vectors.unit[rows]
        d_sq = np.maximum(
            np.einsum("ij,ij->i", pts, pts)[:, None] - 2.0 * (pts @ ex.T) + ex_sq[None, :],
            0.0,
        )
        nearest = np.argmin(d_sq, axis=1)
        dist = np.sqrt(d_sq[np.arange(rows.shape[0]), nearest])
        cluster = model.exemplar_clusters[nearest]
        admitted = dist <= model.admission_radius[cluster]
        labels[rows[admitted]] = cluster[admitted]
    return ClusterAssignment(labels=labels, provenance=provenance, n_clusters=model.n_clusters)


@dataclass
class ClusterSummary:
    """Partition bookkeeping consumed by reporting and the hashtag stats."""

    n_clusters: int
    sizes: np.ndarray  # distinct users per cluster
    n_outliers: int
    event_counts: np.ndarray  # retweet events per cluster
    outlier_event_count: int
    top_users: list[list[tuple[str, int]]]  # per cluster: (user, events)
    tag_names: list[str]
    tag_occurrences: list[dict[int, int]]  # per cluster: tag id -> occurrences
    tag_user_counts: list[dict[int, int]]  # per cluster: tag id -> distinct users

    def partition_total(self) -> int:
        return int(self.sizes.sum()) + self.n_outliers


def cluster_summary(
    assignment: ClusterAssignment,
    store: EventStore,
    index: UserIndex,
    top_users: int = 10,
) -> ClusterSummary:
    """Per-cluster sizes, event volumes, most active users, and hashtag
    usage tables (both raw occurrences and distinct-user counts; outliers are
    tallied separately so sizes plus outliers always partition the users)."""
    labels = assignment.labels
    k = assignment.n_clusters
    sizes = assignment.sizes
    ev_labels = labels[store.retweeter]
    event_counts = np.bincount(ev_labels[ev_labels >= 0], minlength=k).astype(np.int64)
    outlier_events = int((ev_labels < 0).sum())

    top: list[list[tuple[str, int]]] = []
    for c in range(k):
        members = np.flatnonzero(labels == c)
        counts = index.event_counts[members]
        order = np.argsort(-counts, kind="stable")[:top_users]
        top.append([(index.users[members[j]], int(counts[j])) for j in order])

    occurrences: list[dict[int, int]] = [defaultdict(int) for _ in range(k)]
    user_counts: list[dict[int, int]] = [defaultdict(int) for _ in range(k)]
    if store.tag_ids.size:
        ev_idx = store.tag_event_index()
        tag_user = store.retweeter[ev_idx]
        tag_cluster = labels[tag_user]
        tag_id = store.tag_ids
        in_cluster = tag_cluster >= 0
        n_tags = len(store.tags)
        occ_key = tag_cluster[in_cluster].astype(np.int64) * n_tags + tag_id[in_cluster]
        occ_ids, occ_n = np.unique(occ_key, return_counts=True)
        for key, cnt in zip(occ_ids, occ_n):
            occurrences[int(key // n_tags)][int(key % n_tags)] = int(cnt)
        user_key = tag_user[in_cluster].astype(np.int64) * n_tags + tag_id[in_cluster]
        uniq_pairs = np.unique(user_key)
        pair_user = (uniq_pairs // n_tags).astype(np.int64)
        pair_tag = (uniq_pairs % n_tags).astype(np.int64)
        pair_cluster = labels[pair_user]
        uc_key = pair_cluster.astype(np.int64) * n_tags + pair_tag
        uc_ids, uc_n = np.unique(uc_key, return_counts=True)
        for key, cnt in zip(uc_ids, uc_n):
            user_counts[int(key // n_tags)][int(key % n_tags)] = int(cnt)

    return ClusterSummary(
        n_clusters=k,
        sizes=sizes.astype(np.int64),
        n_outliers=assignment.n_outliers,
        event_counts=event_counts,
        outlier_event_count=outlier_events,
        top_users=top,
        tag_names=list(store.tags),
        tag_occurrences=[dict(d) for d in occurrences],
        tag_user_counts=[dict(d) for d in user_counts],
    )
