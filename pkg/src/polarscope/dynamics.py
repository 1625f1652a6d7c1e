"""Per-day polarization series over cluster pairs.

For every window anchor day the latent-space centroid of each cluster's
active users is computed; pairwise dissimilarity is the negative cosine

    D(c1, c2) = -cos(mu_c1, mu_c2)

so -1 means aligned communities and +1 diametrically opposed ones.  Window
toxicity of a cluster is the complement-product aggregate over the scored
eligible posts its members retweeted in the window,

    T_c = 1 - prod_i (1 - F_i * T_i)

with F_i the post's share of the cluster's scored retweet volume in that
window (shares sum to one), and the joint toxicity of a pair is the noisy-or

    T_(c1,c2) = 1 - (1 - T_c1) * (1 - T_c2).

Windows where a cluster has no usable activity are explicit gaps (NaN plus a
mask), never zeros and never imputed.  Gaussian smoothing (sigma = 3 days,
support truncated at +/- 3 sigma, kernel renormalized over in-range non-gap
days) is presentation-only: the stats stage consumes raw columns.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .errors import ConfigError, DataError
from .ingest import EventStore, PostTable, SECONDS_PER_DAY
from .spectral import SampleSpace, SampleStack

logger = logging.getLogger(__name__)

#: bit flags for the gap_flags CSV column
GAP_DIVERGENCE = 1
GAP_TOXICITY = 2


def day_to_date(day: int) -> str:
    return datetime.fromtimestamp(int(day) * SECONDS_PER_DAY, tz=timezone.utc).date().isoformat()


def format_value(x: float) -> str:
    """Fixed float formatting for byte-identical reruns; NaN -> empty."""
    if not math.isfinite(x):
        return ""
    return "%.17g" % x


# ---------------------------------------------------------------------------
# centroids and divergence
# ---------------------------------------------------------------------------


@dataclass
class CentroidSeries:
    """Per-anchor, per-cluster latent centroids (NaN rows where inactive)."""

    anchors: np.ndarray  # every calendar day of the span
    centroids: np.ndarray  # (n_anchors, K, k_sample)
    counts: np.ndarray  # (n_anchors, K) active members
    window_present: np.ndarray  # bool; False where the window was degenerate

    @property
    def n_clusters(self) -> int:
        return int(self.centroids.shape[1])


def centroid_series(
    stack: SampleStack,
    space: SampleSpace,
    labels: np.ndarray,
    anchors_all: np.ndarray,
    n_clusters: int,
) -> CentroidSeries:
    """Mean sample-space projection of each cluster's active users per window.

    ``anchors_all`` is the full calendar span; anchors whose window was
    degenerate (absent from ``stack``) stay fully gapped.
    """
    if n_clusters < 1:
        raise DataError("no clusters to build centroid series for")
    anchors_all = np.asarray(anchors_all, dtype=np.int64)
    n_anchors = anchors_all.shape[0]
    k = space.projections.shape[1]
    sums = np.zeros((n_anchors, n_clusters, k))
    counts = np.zeros((n_anchors, n_clusters), dtype=np.int64)
    present = np.zeros(n_anchors, dtype=bool)

    positions = np.searchsorted(anchors_all, stack.anchors)
    if not np.array_equal(anchors_all[positions], stack.anchors):
        raise DataError("stack anchors are not a subset of the anchor span")
    row_labels = labels[stack.user_ids]
    for w in range(stack.anchors.shape[0]):
        lo, hi = int(stack.row_offsets[w]), int(stack.row_offsets[w + 1])
        pos = positions[w]
        present[pos] = True
        lab = row_labels[lo:hi]
        keep = lab >= 0
        if not keep.any():
            continue
        lab_k = lab[keep].astype(np.int64)
        np.add.at(sums[pos], lab_k, space.projections[lo:hi][keep])
        counts[pos] += np.bincount(lab_k, minlength=n_clusters)

    centroids = np.full_like(sums, np.nan)
    active = counts > 0
    centroids[active] = sums[active] / counts[active][:, None]
    return CentroidSeries(anchors=anchors_all, centroids=centroids, counts=counts, window_present=present)


def divergence_series(cent: CentroidSeries) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise -cosine between cluster centroids per anchor.

    Returns ``(D, mask)`` with shapes ``(n_anchors, K, K)``; ``mask`` is True
    where both centroids exist with positive norm.  The diagonal carries
    -1 where defined (a cluster is perfectly aligned with itself).
    """
    c = cent.centroids
    n, k, d = c.shape
    filled = np.where(np.isfinite(c), c, 0.0)
    norms = np.linalg.norm(filled, axis=2)
    have = (cent.counts > 0) & (norms > 0)
    dots = np.einsum("nkd,nld->nkl", filled, filled)
    denom = norms[:, :, None] * norms[:, None, :]
    mask = have[:, :, None] & have[:, None, :]
    div = np.full((n, k, k), np.nan)
    np.divide(-dots, denom, out=div, where=mask & (denom > 0))
    return div, mask & (denom > 0)


# ---------------------------------------------------------------------------
# toxicity aggregation
# ---------------------------------------------------------------------------


def window_toxicity(shares: np.ndarray, scores: np.ndarray) -> float:
    """Complement-product toxicity of one cluster-window.

    ``shares`` are the posts' F_i (their share of the cluster's scored
    retweet volume; they sum to 1) and ``scores`` the per-post toxicity T_i.
    Evaluated in log space: ``1 - exp(sum log1p(-F_i T_i))``; a post with
    F_i * T_i == 1 drives the product to exactly 1.
    """
    ft = np.asarray(shares, dtype=np.float64) * np.asarray(scores, dtype=np.float64)
    if ft.size == 0:
        raise DataError("window toxicity over an empty post set is undefined (gap, not zero)")
    with np.errstate(divide="ignore"):
        acc = np.log1p(-ft).sum()
    return float(1.0 - np.exp(acc))


def toxicity_series(
    store: EventStore,
    posts: PostTable,
    labels: np.ndarray,
    anchors_all: np.ndarray,
    window_days: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor, per-cluster window toxicity ``T_c``.

    Only scored eligible posts retweeted by cluster members inside the
    trailing window contribute; a cluster with no such retweets in a window
    is a gap.  Returns ``(T, mask)`` of shape ``(n_anchors, K)``.
    """
    anchors_all = np.asarray(anchors_all, dtype=np.int64)
    k = int(labels.max()) + 1 if labels.size else 0
    if k < 1:
        raise DataError("toxicity series needs at least one cluster")
    n_anchors = anchors_all.shape[0]
    t = np.full((n_anchors, k), np.nan)
    mask = np.zeros((n_anchors, k), dtype=bool)

    ev_cluster = labels[store.retweeter].astype(np.int64)
    usable = (ev_cluster >= 0) & posts.scored_eligible[store.post]
    day = store.day
    n_posts = len(store.posts)
    scores = posts.scores

    for a_idx in range(n_anchors):
        anchor = int(anchors_all[a_idx])
        lo = int(np.searchsorted(day, anchor - (window_days - 1), side="left"))
        hi = int(np.searchsorted(day, anchor, side="right"))
        if lo >= hi:
            continue
        seg = slice(lo, hi)
        ok = usable[seg]
        if not ok.any():
            continue
        c_arr = ev_cluster[seg][ok]
        p_arr = store.post[seg][ok].astype(np.int64)
        totals = np.bincount(c_arr, minlength=k)
        key = c_arr * n_posts + p_arr
        uniq, cnt = np.unique(key, return_counts=True)
        u_cluster = uniq // n_posts
        u_post = uniq % n_posts
        shares = cnt / totals[u_cluster]
        with np.errstate(divide="ignore"):
            terms = np.log1p(-shares * scores[u_post])
        acc = np.zeros(k)
        np.add.at(acc, u_cluster, terms)
        active = totals > 0
        t[a_idx, active] = 1.0 - np.exp(acc[active])
        mask[a_idx, active] = True
    return t, mask


def joint_toxicity(t: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Noisy-or pair toxicity ``1 - (1-T_c1)(1-T_c2)`` per anchor.

    Returns ``(TJ, pair_mask)`` of shape ``(n_anchors, K, K)``; a pair-day is
    a gap when either cluster's window toxicity is."""
    comp = np.where(mask, 1.0 - t, np.nan)
    tj = 1.0 - comp[:, :, None] * comp[:, None, :]
    pair_mask = mask[:, :, None] & mask[:, None, :]
    tj[~pair_mask] = np.nan
    return tj, pair_mask


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------


def gaussian_smooth(values: np.ndarray, mask: np.ndarray, sigma: float = 3.0) -> np.ndarray:
    """Gaussian kernel smoothing with support truncated at +/- 3 sigma.

    The kernel is renormalized over the in-range, non-gap days contributing
    to each position; gap days stay NaN in the output (smoothing presents,
    it never imputes).
    """
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool) & np.isfinite(values)
    radius = int(math.ceil(3.0 * sigma))
    offs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offs ** 2) / (2.0 * sigma ** 2))
    filled = np.where(mask, values, 0.0)
    weight = mask.astype(np.float64)
    num = np.convolve(filled, kernel, mode="same")
    den = np.convolve(weight, kernel, mode="same")
    out = np.full(values.shape, np.nan)
    good = mask & (den > 0)
    out[good] = num[good] / den[good]
    return out


# ---------------------------------------------------------------------------
# assembled series table
# ---------------------------------------------------------------------------


@dataclass
class SeriesTable:
    """Raw + smoothed per-day series for clusters and cluster pairs."""

    anchors: np.ndarray  # (n,)
    n_clusters: int
    toxicity: np.ndarray  # (n, K)
    toxicity_mask: np.ndarray
    toxicity_smooth: np.ndarray
    divergence: np.ndarray  # (n, K, K)
    divergence_mask: np.ndarray
    divergence_smooth: np.ndarray
    joint: np.ndarray  # (n, K, K)
    joint_mask: np.ndarray
    joint_smooth: np.ndarray
    window_present: np.ndarray

    def pairs(self):
        for c1 in range(self.n_clusters):
            for c2 in range(c1 + 1, self.n_clusters):
                yield c1, c2


def build_series(
    stack: SampleStack,
    space: SampleSpace,
    labels: np.ndarray,
    anchors_all: np.ndarray,
    store: EventStore,
    posts: PostTable,
    window_days: int,
    n_clusters: int,
    sigma: float = 3.0,
) -> SeriesTable:
    """Assemble the full dynamics table: divergence + toxicity (+ joint),
    raw and smoothed, with explicit gap masks."""
    cent = centroid_series(stack, space, labels, anchors_all, n_clusters)
    div, div_mask = divergence_series(cent)
    tox, tox_mask = toxicity_series(store, posts, labels, anchors_all, window_days)
    tj, tj_mask = joint_toxicity(tox, tox_mask)

    k = n_clusters
    tox_smooth = np.stack([gaussian_smooth(tox[:, c], tox_mask[:, c], sigma) for c in range(k)], axis=1)
    div_smooth = np.full_like(div, np.nan)
    tj_smooth = np.full_like(tj, np.nan)
    for c1 in range(k):
        for c2 in range(k):
            div_smooth[:, c1, c2] = gaussian_smooth(div[:, c1, c2], div_mask[:, c1, c2], sigma)
            tj_smooth[:, c1, c2] = gaussian_smooth(tj[:, c1, c2], tj_mask[:, c1, c2], sigma)
    return SeriesTable(
        anchors=cent.anchors,
        n_clusters=k,
        toxicity=tox,
        toxicity_mask=tox_mask,
        toxicity_smooth=tox_smooth,
        divergence=div,
        divergence_mask=div_mask,
        divergence_smooth=div_smooth,
        joint=tj,
        joint_mask=tj_mask,
        joint_smooth=tj_smooth,
        window_present=cent.window_present,
    )


def write_series(table: SeriesTable, out_dir: str) -> list[str]:
    """Emit plot-ready CSVs: one per cluster (toxicity) and one per pair
    (divergence + joint toxicity).  ``gap_flags`` is a bitmask: 1 =
    divergence gap, 2 = toxicity gap.  Returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    dates = [day_to_date(d) for d in table.anchors]
    for c in range(table.n_clusters):
        path = os.path.join(out_dir, f"cluster_{c}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("date,T_raw,T_smooth,gap_flags\n")
            for i, date in enumerate(dates):
                gap = 0 if table.toxicity_mask[i, c] else GAP_TOXICITY
                fh.write(
                    f"{date},{format_value(table.toxicity[i, c])},"
                    f"{format_value(table.toxicity_smooth[i, c])},{gap}\n"
                )
        written.append(path)
    for c1, c2 in table.pairs():
        path = os.path.join(out_dir, f"pair_{c1}-{c2}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("date,D_raw,D_smooth,T_joint_raw,T_joint_smooth,gap_flags\n")
            for i, date in enumerate(dates):
                flags = 0
                if not table.divergence_mask[i, c1, c2]:
                    flags |= GAP_DIVERGENCE
                if not table.joint_mask[i, c1, c2]:
                    flags |= GAP_TOXICITY
                fh.write(
                    f"{date},{format_value(table.divergence[i, c1, c2])},"
                    f"{format_value(table.divergence_smooth[i, c1, c2])},"
                    f"{format_value(table.joint[i, c1, c2])},"
                    f"{format_value(table.joint_smooth[i, c1, c2])},{flags}\n"
                )
        written.append(path)
    return written
