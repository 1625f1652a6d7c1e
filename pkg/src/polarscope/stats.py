"""Statistical analysis of the polarization series.

All series enter as (values, mask) pairs; masked days are gaps.  Before any
Granger test the two series are jointly compacted: days where either side is
gapped are dropped pairwise and the survivors concatenated into a contiguous
series (the lag algebra of the F-test needs an unbroken index), optionally
clipped to the first N joint observations.

Detrending is a rolling OLS: the residual at an observation is the last
residual of a least-squares line fit on the ``window_obs`` most recent
non-gap observations ending at (and including) it, so residuals never look
ahead — truncating the future cannot change the past.  The OLS solver is QR
with column pivoting and hard rank detection; a deficient design raises
instead of silently pseudo-inverting.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy import stats as sstats

from .clustering import ClusterSummary
from .errors import ConfigError, DataError, NumericError, RankDeficientError

logger = logging.getLogger(__name__)

#: exact Mann-Whitney null enumeration below this product of sample sizes
EXACT_MW_LIMIT = 10_000


# ---------------------------------------------------------------------------
# OLS
# ---------------------------------------------------------------------------


def ols_qr(design: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Least squares via QR with column pivoting.

    Returns ``(beta, rss)``.  Raises :class:`RankDeficientError` when the
    pivoted R diagonal reveals a rank below the column count — no silent
    pseudo-inverse fallback.
    """
    design = np.asarray(design, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, p = design.shape
    if m < p:
        raise RankDeficientError(f"underdetermined design: {m} rows < {p} columns")
    q, r, piv = sla.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag[0] * max(m, p) * np.finfo(np.float64).eps if diag.size else 0.0
    rank = int((diag > tol).sum())
    if rank < p:
        raise RankDeficientError(f"design matrix rank {rank} < {p} columns")
    beta_piv = sla.solve_triangular(r, q.T @ y)
    beta = np.empty(p)
    beta[piv] = beta_piv
    resid = y - design @ beta
    return beta, float(resid @ resid)


# ---------------------------------------------------------------------------
# rolling detrend
# ---------------------------------------------------------------------------


def rolling_detrend(
    values: np.ndarray,
    mask: np.ndarray,
    days: np.ndarray | None = None,
    window_obs: int = 30,
    day_of_week: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Rolling-OLS residuals: only the final observation of each fit is kept.

    At each non-gap observation ``t`` (starting once ``window_obs``
    observations exist) a line in calendar time — plus day-of-week dummies
    when requested — is fit to the ``window_obs`` most recent non-gap
    observations ending at ``t``; the residual for ``t`` is
    ``y_t - y-hat_t``.  Gaps stretch the window backwards rather than
    shrinking the fit.  Returns ``(residuals, residual_mask)`` aligned with
    the input; positions before the window fills, and gap days, stay NaN.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    mask = np.asarray(mask, dtype=bool) & np.isfinite(values)
    if days is None:
        days = np.arange(n, dtype=np.float64)
    else:
        days = np.asarray(days, dtype=np.float64)
        if days.shape[0] != n:
            raise ConfigError("days must align with values")
    if window_obs < 3:
        raise ConfigError(f"window_obs must be >= 3, got {window_obs}")

    residuals = np.full(n, np.nan)
    out_mask = np.zeros(n, dtype=bool)
    valid = np.flatnonzero(mask)
    for j in range(window_obs - 1, valid.shape[0]):
        rows = valid[j - window_obs + 1 : j + 1]
        t = days[rows]
        y = values[rows]
        cols = [np.ones(window_obs), t - t.mean()]
        if day_of_week:
            dows = (days[rows].astype(np.int64)) % 7
            present = np.unique(dows)
            for d in present[1:]:  # first present category is the reference
                cols.append((dows == d).astype(np.float64))
        design = np.column_stack(cols)
        beta, _ = ols_qr(design, y)
        fitted = design[-1] @ beta
        pos = rows[-1]
        residuals[pos] = y[-1] - fitted
        out_mask[pos] = True
    return residuals, out_mask


# ---------------------------------------------------------------------------
# Granger causality
# ---------------------------------------------------------------------------


@dataclass
class GrangerResult:
    direction: str  # "x->y" or "y->x"
    lag: int
    f_stat: float
    p_value: float
    nobs: int


def granger_test(x: np.ndarray, y: np.ndarray, lag: int) -> GrangerResult:
    """F-test of whether lags of ``x`` improve the AR(lag) model of ``y``.

    Both series must already be contiguous (gap-compacted) and aligned.
    With ``p = lag`` lags and ``n`` usable observations the statistic is

        F = ((RSS_r - RSS_u) / p) / (RSS_u / (n - 2p - 1))

    against ``F(p, n - 2p - 1)``.  Requires ``n_total > 3p + 5``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ConfigError("x and y must be aligned 1-d arrays")
    if lag < 1:
        raise ConfigError(f"lag must be >= 1, got {lag}")
    n_total = x.shape[0]
    if n_total <= 3 * lag + 5:
        raise DataError(f"need more than {3 * lag + 5} joint observations for lag {lag}, have {n_total}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise DataError("granger_test requires gap-free series; compact them first")

    p = lag
    n = n_total - p
    target = y[p:]
    y_lags = np.column_stack([y[p - 1 - i : n_total - 1 - i] for i in range(p)])
    x_lags = np.column_stack([x[p - 1 - i : n_total - 1 - i] for i in range(p)])
    ones = np.ones(n)
    restricted = np.column_stack([ones, y_lags])
    unrestricted = np.column_stack([ones, y_lags, x_lags])
    _, rss_r = ols_qr(restricted, target)
    _, rss_u = ols_qr(unrestricted, target)
    df_denom = n - 2 * p - 1
    if df_denom < 1:
        raise DataError(f"no denominator degrees of freedom at lag {lag} with {n} usable rows")
    if rss_u <= 0.0:
        raise NumericError(f"unrestricted model fits perfectly at lag {lag}; F undefined")
    f_stat = max((rss_r - rss_u) / p, 0.0) / (rss_u / df_denom)
    p_value = float(sstats.f.sf(f_stat, p, df_denom))
    return GrangerResult(direction="x->y", lag=lag, f_stat=float(f_stat), p_value=p_value, nobs=n)


@dataclass
class ScanRow:
    direction: str
    lag: int
    f_stat: float | None
    p_value: float | None
    nobs: int | None
    error: str | None = None


@dataclass
class GrangerScan:
    rows: list[ScanRow]
    best: dict[str, ScanRow]  # per direction: argmin-p row (ties -> smaller lag)
    n_joint: int
    n_executed: int  # tests that produced a p-value (Bonferroni mass)


def compact_joint(
    x: np.ndarray,
    y: np.ndarray,
    mask_x: np.ndarray | None = None,
    mask_y: np.ndarray | None = None,
    clip: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Drop gapped days pairwise and concatenate the joint survivors into
    contiguous series, optionally clipped to the first ``clip`` observations."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ok = np.isfinite(x) & np.isfinite(y)
    if mask_x is not None:
        ok &= np.asarray(mask_x, dtype=bool)
    if mask_y is not None:
        ok &= np.asarray(mask_y, dtype=bool)
    xs, ys = x[ok], y[ok]
    if clip is not None:
        if clip < 1:
            raise ConfigError(f"clip must be >= 1, got {clip}")
        xs, ys = xs[:clip], ys[:clip]
    return xs, ys


def granger_scan(
    x: np.ndarray,
    y: np.ndarray,
    max_lag: int,
    mask_x: np.ndarray | None = None,
    mask_y: np.ndarray | None = None,
    clip: int | None = None,
) -> GrangerScan:
    """Scan lags 1..max_lag in both directions over the gap-compacted pair.

    Per-lag errors (insufficient data, rank deficiency, ...) are recorded in
    the audit rows, not raised; a direction with no successful lag simply has
    no best row.  ``n_executed`` counts tests that yielded a p-value — the
    Bonferroni mass contribution of this scan.
    """
    if max_lag < 1:
        raise ConfigError(f"max_lag must be >= 1, got {max_lag}")
    xs, ys = compact_joint(x, y, mask_x, mask_y, clip)
    rows: list[ScanRow] = []
    best: dict[str, ScanRow] = {}
    executed = 0
    for direction, (a, b) in (("x->y", (xs, ys)), ("y->x", (ys, xs))):
        for lag in range(1, max_lag + 1):
            try:
                res = granger_test(a, b, lag)
            except (DataError, NumericError) as exc:
                rows.append(ScanRow(direction, lag, None, None, None, error=f"{type(exc).__name__}: {exc}"))
                continue
            row = ScanRow(direction, lag, res.f_stat, res.p_value, res.nobs)
            rows.append(row)
            executed += 1
            cur = best.get(direction)
            if cur is None or row.p_value < cur.p_value:
                best[direction] = row
    return GrangerScan(rows=rows, best=best, n_joint=int(xs.shape[0]), n_executed=executed)


def bonferroni_threshold(alpha: float, m: int) -> float:
    """Family-wise threshold alpha / m over the tests actually executed."""
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    if m < 1:
        raise ConfigError(f"Bonferroni m must be >= 1, got {m}")
    return alpha / m


# ---------------------------------------------------------------------------
# Mann-Whitney / AUC
# ---------------------------------------------------------------------------


@dataclass
class ToxicityComparison:
    u_stat: float
    auc: float
    p_value: float
    n1: int
    n2: int
    method: str


def mann_whitney_auc(a: np.ndarray, b: np.ndarray) -> ToxicityComparison:
    """One-sided Mann-Whitney U ("a stochastically greater than b") with the
    rank-biserial AUC ``U / (n1 * n2)``.

    Ties get midranks.  The null p-value uses exact enumeration when
    ``n1 * n2 <= 10_000`` (the classical tie-free null) and the normal
    approximation with continuity correction and tie-corrected variance
    above.  If every pooled value is identical the comparison carries no
    evidence: AUC 0.5, p 1.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DataError("mann_whitney_auc needs non-empty samples")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise DataError("mann_whitney_auc requires finite values")
    n1, n2 = int(a.size), int(b.size)
    if a.min() == a.max() == b.min() == b.max():
        return ToxicityComparison(
            u_stat=n1 * n2 / 2.0, auc=0.5, p_value=1.0, n1=n1, n2=n2, method="degenerate"
        )
    method = "exact" if n1 * n2 <= EXACT_MW_LIMIT else "asymptotic"
    res = sstats.mannwhitneyu(a, b, alternative="greater", method=method, use_continuity=True)
    u1 = float(res.statistic)
    return ToxicityComparison(
        u_stat=u1,
        auc=u1 / (n1 * n2),
        p_value=float(res.pvalue),
        n1=n1,
        n2=n2,
        method=method,
    )


@dataclass
class RankTestReport:
    order: list[int]  # clusters, most-toxic first (by mean score)
    comparisons: list[tuple[int, int, ToxicityComparison]]  # consecutive pairs


def toxicity_rank_tests(scores_by_cluster: list[np.ndarray]) -> RankTestReport:
    """Order clusters most-toxic-first by mean retweet-level score and test
    each consecutive pair one-sidedly (higher vs lower)."""
    usable = [c for c, s in enumerate(scores_by_cluster) if np.asarray(s).size > 0]
    if len(usable) < 2:
        raise DataError("need at least two clusters with scored retweets to rank")
    means = {c: float(np.mean(scores_by_cluster[c])) for c in usable}
    order = sorted(usable, key=lambda c: (-means[c], c))
    comparisons = []
    for hi, lo in zip(order[:-1], order[1:]):
        comp = mann_whitney_auc(scores_by_cluster[hi], scores_by_cluster[lo])
        comparisons.append((hi, lo, comp))
    return RankTestReport(order=order, comparisons=comparisons)


# ---------------------------------------------------------------------------
# hashtag log-odds
# ---------------------------------------------------------------------------


@dataclass
class LogOddsEntry:
    cluster: int
    tag: str
    log_odds: float
    users_in: int
    users_out: int
    n_in: int
    n_out: int

    @property
    def prevalence_in(self) -> float:
        return self.users_in / self.n_in if self.n_in else 0.0

    @property
    def prevalence_out(self) -> float:
        return self.users_out / self.n_out if self.n_out else 0.0


def hashtag_log_odds(
    summary: ClusterSummary,
    smoothing: float = 0.5,
    top_n: int | None = None,
) -> list[LogOddsEntry]:
    """Smoothed log-odds of hashtag *user prevalence* per cluster vs all
    other clusters (outliers excluded from both sides):

        LO = log((k_in + s) / (n_in - k_in + s))
           - log((k_out + s) / (n_out - k_out + s))

    with k = distinct users of the tag and n = cluster user counts.  Entries
    are sorted per cluster by log-odds (descending; ties by tag), optionally
    keeping the ``top_n`` per cluster.
    """
    if smoothing <= 0:
        raise ConfigError(f"smoothing must be positive, got {smoothing}")
    sizes = summary.sizes
    total_users = int(sizes.sum())
    out: list[LogOddsEntry] = []
    for c in range(summary.n_clusters):
        n_in = int(sizes[c])
        n_out = total_users - n_in
        entries = []
        for tag_id, k_in in summary.tag_user_counts[c].items():
            k_out = 0
            for other in range(summary.n_clusters):
                if other != c:
                    k_out += summary.tag_user_counts[other].get(tag_id, 0)
            lo = math.log((k_in + smoothing) / (n_in - k_in + smoothing)) - math.log(
                (k_out + smoothing) / (n_out - k_out + smoothing)
            )
            entries.append(
                LogOddsEntry(
                    cluster=c,
                    tag=summary.tag_names[tag_id],
                    log_odds=lo,
                    users_in=int(k_in),
                    users_out=int(k_out),
                    n_in=n_in,
                    n_out=n_out,
                )
            )
        entries.sort(key=lambda e: (-e.log_odds, e.tag))
        if top_n is not None:
            entries = entries[:top_n]
        out.extend(entries)
    return out


# ---------------------------------------------------------------------------
# Granger suite over a series table
# ---------------------------------------------------------------------------


@dataclass
class PairTests:
    c1: int
    c2: int
    scans: dict[str, GrangerScan]  # "toxicity" (T_c1 vs T_c2), "structure" (T_joint vs D)


@dataclass
class GrangerSuite:
    pairs: list[PairTests]
    m: int  # executed tests with p-values across the whole suite
    alpha: float
    threshold: float
    detrend_window: int
    max_lag: int
    clip: int | None

    def significant(self, p_value: float | None) -> bool:
        return p_value is not None and p_value < self.threshold


def run_granger_suite(
    table,
    detrend_window: int = 30,
    day_of_week: bool = False,
    max_lag: int = 155,
    clip: int | None = 500,
    alpha: float = 0.05,
) -> GrangerSuite:
    """Detrend the raw series and scan Granger causality for every cluster
    pair: cluster toxicities against each other, and joint toxicity against
    divergence.  The Bonferroni mass m is the number of executed tests."""
    k = table.n_clusters
    days = table.anchors.astype(np.float64)

    tox_resid: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for c in range(k):
        tox_resid[c] = rolling_detrend(
            table.toxicity[:, c], table.toxicity_mask[:, c], days, detrend_window, day_of_week
        )

    pairs: list[PairTests] = []
    m = 0
    for c1, c2 in table.pairs():
        r1, m1 = tox_resid[c1]
        r2, m2 = tox_resid[c2]
        tox_scan = granger_scan(r1, r2, max_lag, m1, m2, clip)
        rj, mj = rolling_detrend(
            table.joint[:, c1, c2], table.joint_mask[:, c1, c2], days, detrend_window, day_of_week
        )
        rd, md = rolling_detrend(
            table.divergence[:, c1, c2], table.divergence_mask[:, c1, c2], days, detrend_window, day_of_week
        )
        struct_scan = granger_scan(rj, rd, max_lag, mj, md, clip)
        pairs.append(PairTests(c1=c1, c2=c2, scans={"toxicity": tox_scan, "structure": struct_scan}))
        m += tox_scan.n_executed + struct_scan.n_executed

    threshold = bonferroni_threshold(alpha, m) if m else float("nan")
    if m == 0:
        logger.warning("no Granger test could be executed (all lags errored)")
    return GrangerSuite(
        pairs=pairs,
        m=m,
        alpha=alpha,
        threshold=threshold,
        detrend_window=detrend_window,
        max_lag=max_lag,
        clip=clip,
    )
