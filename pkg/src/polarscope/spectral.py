"""Two-stage windowed spectral embedding of retweet incidence matrices.

Stage one builds, for every trailing window, the user x influencer retweet
count matrix, double-centers it *implicitly* (the dense centered matrix is
never materialized), and takes a truncated SVD ``A = P Lambda Q^T`` with a
seeded randomized block Krylov iteration.  The per-window scores are
``A @ Q-tilde`` over the retained ``k_window`` dimensions.

Stage two stacks all window score blocks into the sample matrix ``S``
(z-scored per column), runs an exact PCA on its 30x30 Gram matrix, and
projects every (user, window) row into ``k_sample`` dimensions.  Per-user
vectors are the sum (or mean) of a user's window projections; their L2
normalization feeds the clustering stage.

Double centering of a count matrix ``A`` with row means ``r``, column means
``c`` and grand mean ``g`` is ``C = A - r 1^T - 1 c^T + g 1 1^T``; the
operator below applies ``C`` and ``C^T`` to blocks of vectors in sparse
time and memory.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ConfigError, DataError, NumericError
from .ingest import EventStore, WindowSet, WindowSpec

logger = logging.getLogger(__name__)

#: residual tolerance (relative to sigma_1) for SVD convergence
DEFAULT_SVD_TOL = 1e-8
#: hard iteration budget for the block Krylov loop
DEFAULT_SVD_MAX_ITER = 1000

_CACHE_MAGIC = b"PSDC"
_CACHE_VERSION = 1

_SKIP_EMPTY = 0
_SKIP_TOO_FEW = 1
_SKIP_REASONS = {_SKIP_EMPTY: "no events", _SKIP_TOO_FEW: "fewer than 2 users or influencers"}


# ---------------------------------------------------------------------------
# incidence + centered operator
# ---------------------------------------------------------------------------


@dataclass
class WindowIncidence:
    """Per-window retweet counts with centering statistics."""

    anchor_day: int
    matrix: sparse.csr_matrix  # (n_users, n_influencers), float64 counts
    user_ids: np.ndarray  # global dense user ids, ascending
    influencer_ids: np.ndarray
    row_means: np.ndarray
    col_means: np.ndarray
    grand_mean: float


def build_incidence(store: EventStore, window: WindowSpec) -> tuple[WindowIncidence | None, int]:
    """Count matrix for one window, or ``(None, reason_code)`` when the
    window is degenerate (empty, or fewer than 2 distinct users/influencers)."""
    if window.n_events == 0:
        return None, _SKIP_EMPTY
    sl = slice(window.start, window.stop)
    users, u_inv = np.unique(store.retweeter[sl], return_inverse=True)
    infl, v_inv = np.unique(store.influencer[sl], return_inverse=True)
    if users.shape[0] < 2 or infl.shape[0] < 2:
        return None, _SKIP_TOO_FEW
    data = np.ones(window.n_events, dtype=np.float64)
    mat = sparse.coo_matrix((data, (u_inv, v_inv)), shape=(users.shape[0], infl.shape[0])).tocsr()
    m, n = mat.shape
    row_sums = np.asarray(mat.sum(axis=1)).ravel()
    col_sums = np.asarray(mat.sum(axis=0)).ravel()
    total = float(row_sums.sum())
    inc = WindowIncidence(
        anchor_day=window.anchor_day,
        matrix=mat,
        user_ids=users.astype(np.int32),
        influencer_ids=infl.astype(np.int32),
        row_means=row_sums / n,
        col_means=col_sums / m,
        grand_mean=total / (m * n),
    )
    return inc, -1


class CenteredOperator:
    """Implicit double-centered matrix: applies ``C`` and ``C^T`` to blocks.

    For ``C = A - r 1^T - 1 c^T + g 1 1^T`` and a block ``X`` (n x b):

        C X   = A X - r (1^T X) - 1 (c^T X) + g 1 (1^T X)
        C^T U = A^T U - 1 (r^T U) - c (1^T U) + g 1 (1^T U)

    so each application costs one sparse product plus rank-one corrections.
    """

    def __init__(self, matrix: sparse.csr_matrix, row_means: np.ndarray,
                 col_means: np.ndarray, grand_mean: float) -> None:
        self.matrix = matrix
        self._matrix_t = matrix.T.tocsr()
        self.row_means = np.asarray(row_means, dtype=np.float64)
        self.col_means = np.asarray(col_means, dtype=np.float64)
        self.grand_mean = float(grand_mean)
        self.shape = matrix.shape

    @classmethod
    def from_incidence(cls, inc: WindowIncidence) -> "CenteredOperator":
        return cls(inc.matrix, inc.row_means, inc.col_means, inc.grand_mean)

    @classmethod
    def from_counts(cls, matrix) -> "CenteredOperator":
        """Build centering statistics directly from a (sparse or dense) count
        matrix."""
        mat = sparse.csr_matrix(matrix, dtype=np.float64)
        m, n = mat.shape
        row_sums = np.asarray(mat.sum(axis=1)).ravel()
        col_sums = np.asarray(mat.sum(axis=0)).ravel()
        return cls(mat, row_sums / n, col_sums / m, float(row_sums.sum()) / (m * n))

    def matmat(self, block: np.ndarray) -> np.ndarray:
        x = np.asarray(block, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(-1, 1)
        colsum = x.sum(axis=0)
        out = self.matrix @ x
        out -= np.outer(self.row_means, colsum)
        out -= (self.col_means @ x - self.grand_mean * colsum)[None, :]
        return out.ravel() if squeeze else out

    def rmatmat(self, block: np.ndarray) -> np.ndarray:
        u = np.asarray(block, dtype=np.float64)
        squeeze = u.ndim == 1
        if squeeze:
            u = u.reshape(-1, 1)
        colsum = u.sum(axis=0)
        out = self._matrix_t @ u
        out -= np.outer(self.col_means, colsum)
        out -= (self.row_means @ u - self.grand_mean * colsum)[None, :]
        return out.ravel() if squeeze else out

    @property
    def frobenius_sq(self) -> float:
        """||C||_F^2 without materializing C (exact algebraic identity)."""
        m, n = self.shape
        a_sq = float((self.matrix.data ** 2).sum())
        return (
            a_sq
            - n * float(self.row_means @ self.row_means)
            - m * float(self.col_means @ self.col_means)
            + m * n * self.grand_mean ** 2
        )


class _DenseOperator:
    """Adapter giving plain ndarrays the operator interface."""

    def __init__(self, matrix: np.ndarray) -> None:
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.shape = self.matrix.shape

    def matmat(self, block):
        return self.matrix @ block

    def rmatmat(self, block):
        return self.matrix.T @ block

    @property
    def frobenius_sq(self) -> float:
        return float((self.matrix ** 2).sum())


# ---------------------------------------------------------------------------
# randomized block Krylov truncated SVD
# ---------------------------------------------------------------------------


@dataclass
class SVDResult:
    u: np.ndarray  # (m, k)
    sigma: np.ndarray  # (k,)
    vt: np.ndarray  # (k, n)
    iterations: int
    residuals: np.ndarray  # per-triplet ||M v_i - sigma_i u_i||


def _orthonormal_columns(block: np.ndarray, against: np.ndarray | None, eps: float) -> np.ndarray:
    """Orthonormalize ``block`` against ``against`` and internally, dropping
    directions that collapse below ``eps`` (Krylov-space saturation)."""
    b = np.array(block, dtype=np.float64, copy=True)
    for _ in range(2):  # two rounds of classical Gram-Schmidt for stability
        if against is not None and against.shape[1]:
            b -= against @ (against.T @ b)
    q, r = np.linalg.qr(b)
    keep = np.abs(np.diag(r)) > eps
    q = q[:, keep]
    if against is not None and against.shape[1] and q.shape[1]:
        # one defensive re-orthogonalization after the QR
        q -= against @ (against.T @ q)
        q, r = np.linalg.qr(q)
        q = q[:, np.abs(np.diag(r)) > eps]
    return q


def truncated_svd(
    operator,
    k: int,
    *,
    tol: float = DEFAULT_SVD_TOL,
    max_iter: int = DEFAULT_SVD_MAX_ITER,
    rng: np.random.Generator | int | None = None,
    block_size: int | None = None,
) -> SVDResult:
    """Truncated SVD of an implicit operator by randomized block Krylov.

    The operator needs ``shape``, ``matmat`` (apply M to an n x b block) and
    ``rmatmat`` (apply M^T to an m x b block); plain ndarrays are wrapped.
    Starting from a seeded Gaussian block ``Y_0 = M Omega`` the orthonormal
    basis grows by ``Y_{i+1} = M (M^T Q_i)``; each pass does Rayleigh--Ritz
    through the small SVD of ``B = Q^T M`` and stops when every retained
    triplet satisfies ``||M v_i - sigma_i u_i|| <= tol * sigma_1``.

    Exceeding ``max_iter`` raises :class:`NumericError` carrying the current
    residuals.  A zero operator returns zero singular values with
    identity-column singular vectors.  Top singular vectors are sign-fixed so
    the largest-magnitude loading of each right vector is positive.
    """
    if isinstance(operator, np.ndarray):
        operator = _DenseOperator(operator)
    m, n = operator.shape
    kmax = min(m, n)
    if not 1 <= k <= kmax:
        raise ConfigError(f"k must be in [1, min(m, n)] = [1, {kmax}], got {k}")
    if tol <= 0:
        raise ConfigError(f"tol must be positive, got {tol}")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    b = block_size if block_size is not None else min(kmax, k + 10)
    if b < k:
        raise ConfigError(f"block_size must be >= k, got {b} < {k}")

    def zero_result() -> SVDResult:
        return SVDResult(
            u=np.eye(m, k),
            sigma=np.zeros(k),
            vt=np.eye(n, k).T.copy(),
            iterations=0,
            residuals=np.zeros(k),
        )

    omega = gen.standard_normal((n, b))
    seed_block = operator.matmat(omega)
    scale = float(np.abs(seed_block).max()) if seed_block.size else 0.0
    if scale == 0.0:
        return zero_result()
    drop_eps = max(m, n) * np.finfo(np.float64).eps * scale

    basis = _orthonormal_columns(seed_block, None, drop_eps)
    if basis.shape[1] == 0:
        return zero_result()

    last = None
    for iteration in range(1, max_iter + 1):
        bt = operator.rmatmat(basis)  # (n, q) == M^T Q
        q_dim = basis.shape[1]
        ub, sv, vt = np.linalg.svd(bt.T, full_matrices=False)
        r = min(k, sv.shape[0])
        u = basis @ ub[:, :r]
        v = vt[:r].T
        sigma = sv[:r]
        if sigma.shape[0] < k:  # pad (rank exhausted below k)
            pad = k - sigma.shape[0]
            u = np.hstack([u, np.zeros((m, pad))])
            v = np.hstack([v, np.zeros((n, pad))])
            sigma = np.concatenate([sigma, np.zeros(pad)])
        if sigma[0] == 0.0:
            return zero_result()

        resid_block = operator.matmat(v) - u * sigma[None, :]
        residuals = np.linalg.norm(resid_block, axis=0)
        last = (u, sigma, v, residuals)
        if np.all(residuals <= tol * sigma[0]):
            u, sigma, v = _fix_signs(u, sigma, v)
            return SVDResult(u=u, sigma=sigma, vt=v.T.copy(), iterations=iteration, residuals=residuals)

        if q_dim >= kmax:
            # basis spans the whole row/column space; Rayleigh--Ritz is the
            # exact SVD, so any residual beyond tolerance is a numerical floor
            u, sigma, v = _fix_signs(u, sigma, v)
            return SVDResult(u=u, sigma=sigma, vt=v.T.copy(), iterations=iteration, residuals=residuals)

        new_block = operator.matmat(bt[:, -min(b, q_dim):])
        grown = _orthonormal_columns(new_block, basis, drop_eps)
        if grown.shape[1] == 0:
            # Krylov space saturated without meeting tol: accept the exact
            # Ritz values on the invariant subspace
            u, sigma, v = _fix_signs(u, sigma, v)
            return SVDResult(u=u, sigma=sigma, vt=v.T.copy(), iterations=iteration, residuals=residuals)
        basis = np.hstack([basis, grown])
        if basis.shape[1] > kmax:
            basis = basis[:, :kmax]

    u, sigma, v, residuals = last
    raise NumericError(
        f"truncated SVD did not converge in {max_iter} iterations; "
        f"worst residual {residuals.max():.3e} vs bound {tol * sigma[0]:.3e} "
        f"(residuals: {np.array2string(residuals, precision=3)})"
    )


def _fix_signs(u: np.ndarray, sigma: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic sign convention: the largest-|.| loading of each right
    singular vector is made positive (ties resolved by lowest index)."""
    for i in range(v.shape[1]):
        j = int(np.argmax(np.abs(v[:, i])))
        if v[j, i] < 0:
            v[:, i] = -v[:, i]
            u[:, i] = -u[:, i]
    return u, sigma, v


# ---------------------------------------------------------------------------
# stage one: per-window decompositions
# ---------------------------------------------------------------------------


@dataclass
class WindowDecomposition:
    """Truncated decomposition of one window's centered incidence."""

    anchor_day: int
    user_ids: np.ndarray  # (n_users,) global dense ids
    influencer_ids: np.ndarray
    sigma: np.ndarray  # (k_window,), zero-padded past k_actual
    scores: np.ndarray  # (n_users, k_window), zero-padded columns
    rotation: np.ndarray  # (n_influencers, k_actual) right singular vectors
    k_actual: int
    padded: bool

    @property
    def n_users(self) -> int:
        return int(self.user_ids.shape[0])


@dataclass
class DecompositionSet:
    windows: list[WindowDecomposition]
    skipped: list[tuple[int, str]]  # (anchor_day, reason)
    k_window: int
    seed: int

    def __len__(self) -> int:
        return len(self.windows)


def window_scores(
    inc: WindowIncidence,
    k_window: int,
    *,
    tol: float = DEFAULT_SVD_TOL,
    max_iter: int = DEFAULT_SVD_MAX_ITER,
    rng: np.random.Generator | int | None = None,
) -> WindowDecomposition:
    """Decompose one window: implicit double-centering, truncated SVD of the
    centered matrix, and scores ``A @ Q-tilde`` — the raw counts projected
    onto the centered decomposition's rotation, so activity and popularity
    structure survives into the sample matrix.

    The centered matrix of an ``m x n`` window has rank at most
    ``min(m-1, n-1)``, so the retained dimension is clipped there and the
    score/singular-value blocks are zero-padded back to ``k_window`` (with
    ``padded`` set) to keep the sample matrix rectangular.
    """
    if k_window < 1:
        raise ConfigError(f"k_window must be >= 1, got {k_window}")
    m, n = inc.matrix.shape
    k_eff = min(k_window, m - 1, n - 1)
    op = CenteredOperator.from_incidence(inc)
    res = truncated_svd(op, k_eff, tol=tol, max_iter=max_iter, rng=rng)
    rotation = res.vt.T  # (n, k_eff)
    scores_eff = inc.matrix @ rotation  # A @ Q-tilde, exactly as defined
    scores = np.zeros((m, k_window))
    scores[:, :k_eff] = scores_eff
    sigma = np.zeros(k_window)
    sigma[:k_eff] = res.sigma
    return WindowDecomposition(
        anchor_day=inc.anchor_day,
        user_ids=inc.user_ids,
        influencer_ids=inc.influencer_ids,
        sigma=sigma,
        scores=scores,
        rotation=rotation,
        k_actual=k_eff,
        padded=k_eff < k_window,
    )


def window_rng(seed: int, anchor_day: int) -> np.random.Generator:
    """Deterministic per-window generator: identical (seed, anchor) pairs
    yield identical SVD starts no matter how windows are scheduled."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(np.uint64(anchor_day))]))


def decompose_windows(
    store: EventStore,
    windows: WindowSet,
    k_window: int = 30,
    *,
    tol: float = DEFAULT_SVD_TOL,
    max_iter: int = DEFAULT_SVD_MAX_ITER,
    seed: int = 0,
) -> DecompositionSet:
    """Run stage one over every window; degenerate windows are skipped and
    recorded (their anchors become gaps downstream)."""
    out: list[WindowDecomposition] = []
    skipped: list[tuple[int, str]] = []
    for w in windows:
        inc, skip_code = build_incidence(store, w)
        if inc is None:
            skipped.append((w.anchor_day, _SKIP_REASONS[skip_code]))
            continue
        dec = window_scores(inc, k_window, tol=tol, max_iter=max_iter, rng=window_rng(seed, w.anchor_day))
        out.append(dec)
    if skipped:
        logger.info("skipped %d degenerate windows of %d", len(skipped), len(windows))
    return DecompositionSet(windows=out, skipped=skipped, k_window=k_window, seed=seed)


# ---------------------------------------------------------------------------
# stage two: sample matrix, PCA, user vectors
# ---------------------------------------------------------------------------


@dataclass
class SampleStack:
    """All window score blocks stacked and z-scored per column."""

    s: np.ndarray  # (N, k_window)
    col_mean: np.ndarray
    col_sd: np.ndarray  # population sd; zero-variance columns get divisor 1
    zero_sd: np.ndarray  # bool mask of zero-variance columns
    anchors: np.ndarray  # (n_windows,)
    row_offsets: np.ndarray  # (n_windows + 1,)
    user_ids: np.ndarray  # (N,) global dense user id per row

    @property
    def n_rows(self) -> int:
        return int(self.s.shape[0])


def assemble_sample_matrix(decomps: DecompositionSet) -> SampleStack:
    """Stack per-window scores into the sample matrix S and z-score columns
    (population sd; near-constant columns — sd below 1e-12 — are zeroed and
    flagged rather than divided)."""
    if not decomps.windows:
        raise DataError("no usable windows: every window was degenerate or empty")
    blocks = [d.scores for d in decomps.windows]
    s = np.vstack(blocks)
    user_ids = np.concatenate([d.user_ids for d in decomps.windows])
    sizes = np.array([d.n_users for d in decomps.windows], dtype=np.int64)
    row_offsets = np.concatenate(([0], np.cumsum(sizes)))
    anchors = np.array([d.anchor_day for d in decomps.windows], dtype=np.int64)

    col_mean = s.mean(axis=0)
    col_sd = s.std(axis=0)  # ddof=0
    zero_sd = col_sd < 1e-12
    divisor = np.where(zero_sd, 1.0, col_sd)
    s = (s - col_mean) / divisor
    s[:, zero_sd] = 0.0
    if zero_sd.any():
        logger.warning("%d constant sample columns zeroed", int(zero_sd.sum()))
    return SampleStack(
        s=s,
        col_mean=col_mean,
        col_sd=col_sd,
        zero_sd=zero_sd,
        anchors=anchors,
        row_offsets=row_offsets,
        user_ids=user_ids,
    )


@dataclass
class SampleSpace:
    """Second-stage PCA over the sample matrix plus projected scores."""

    rotation: np.ndarray  # (k_window, k_sample)
    singular_values: np.ndarray  # all k_window values (scree data)
    explained_variance_ratio: np.ndarray
    k_sample: int
    projections: np.ndarray  # (N, k_sample)
    col_mean: np.ndarray
    col_sd: np.ndarray

    def project(self, rows: np.ndarray) -> np.ndarray:
        """Rotate already-z-scored rows into sample space (linear operator)."""
        return np.asarray(rows, dtype=np.float64) @ self.rotation

    def transform(self, raw_scores: np.ndarray) -> np.ndarray:
        """Z-score raw window scores with the stored statistics, then rotate."""
        zero = self.col_sd < 1e-12
        divisor = np.where(zero, 1.0, self.col_sd)
        z = (np.asarray(raw_scores, dtype=np.float64) - self.col_mean) / divisor
        z[:, zero] = 0.0
        return z @ self.rotation


def sample_pca(stack: SampleStack, k_sample: int = 4) -> SampleSpace:
    """Exact PCA of the z-scored sample matrix via its Gram matrix.

    Emits the full singular spectrum (scree data).  If ``k_sample`` exceeds
    the numerical rank it is reduced with a warning.
    """
    if k_sample < 1:
        raise ConfigError(f"k_sample must be >= 1, got {k_sample}")
    k_window = stack.s.shape[1]
    if k_sample > k_window:
        raise ConfigError(f"k_sample ({k_sample}) cannot exceed k_window ({k_window})")
    gram = stack.s.T @ stack.s
    eigvals, eigvecs = np.linalg.eigh(gram)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]
    singular_values = np.sqrt(eigvals)
    if singular_values[0] == 0.0:
        raise DataError("sample matrix is identically zero; nothing to embed")
    rank = int((singular_values > singular_values[0] * 1e-12).sum())
    k_eff = k_sample
    if k_sample > rank:
        logger.warning("k_sample=%d exceeds sample rank %d; reducing", k_sample, rank)
        k_eff = rank
    rotation = eigvecs[:, :k_eff].copy()
    for i in range(k_eff):  # same sign convention as the window SVD
        j = int(np.argmax(np.abs(rotation[:, i])))
        if rotation[j, i] < 0:
            rotation[:, i] = -rotation[:, i]
    total = float(eigvals.sum())
    explained = eigvals / total if total > 0 else np.zeros_like(eigvals)
    projections = stack.s @ rotation
    return SampleSpace(
        rotation=rotation,
        singular_values=singular_values,
        explained_variance_ratio=explained,
        k_sample=k_eff,
        projections=projections,
        col_mean=stack.col_mean,
        col_sd=stack.col_sd,
    )


@dataclass
class UserVectors:
    """Aggregated per-user sample-space vectors.

    ``raw`` is the sum (or mean) of the user's per-window projections;
    ``norms`` are raw L2 norms (the activity scale the fit threshold tau is
    applied to); ``unit`` is the L2-normalized direction (zero rows stay
    zero and are flagged in ``zero_norm``).
    """

    raw: np.ndarray  # (n_users, k_sample)
    norms: np.ndarray
    unit: np.ndarray
    window_counts: np.ndarray  # windows each user appeared in
    aggregation: str
    excluded: int  # users that appeared in no usable window

    @property
    def n_users(self) -> int:
        return int(self.raw.shape[0])

    @property
    def zero_norm(self) -> np.ndarray:
        return self.norms == 0.0


def user_vectors(
    stack: SampleStack,
    space: SampleSpace,
    n_users: int,
    aggregation: str = "sum",
) -> UserVectors:
    """Aggregate window projections per user (default: sum, so the norm
    reflects both alignment and activity)."""
    if aggregation not in ("sum", "mean"):
        raise ConfigError(f"aggregation must be 'sum' or 'mean', got {aggregation!r}")
    k = space.projections.shape[1]
    raw = np.zeros((n_users, k))
    np.add.at(raw, stack.user_ids, space.projections)
    window_counts = np.bincount(stack.user_ids, minlength=n_users).astype(np.int64)
    if aggregation == "mean":
        nz = window_counts > 0
        raw[nz] /= window_counts[nz, None]
    norms = np.linalg.norm(raw, axis=1)
    unit = np.zeros_like(raw)
    nz = norms > 0
    unit[nz] = raw[nz] / norms[nz, None]
    excluded = int((window_counts == 0).sum())
    if excluded:
        logger.info("%d of %d users appear in no usable window (zero vectors)", excluded, n_users)
    return UserVectors(
        raw=raw,
        norms=norms,
        unit=unit,
        window_counts=window_counts,
        aggregation=aggregation,
        excluded=excluded,
    )


# ---------------------------------------------------------------------------
# binary decomposition cache
# ---------------------------------------------------------------------------


def save_decompositions(path, decomps: DecompositionSet, config_digest: bytes) -> None:
    """Write the stage-one decompositions to a versioned little-endian binary
    cache (header: magic, version, config digest, seed, dims; then one block
    per window, then the skipped-window trailer)."""
    if len(config_digest) != 32:
        raise ConfigError("config_digest must be 32 bytes (sha256)")
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<I", _CACHE_VERSION))
        fh.write(config_digest)
        fh.write(struct.pack("<qii", decomps.seed, decomps.k_window, len(decomps.windows)))
        for d in decomps.windows:
            flags = 1 if d.padded else 0
            fh.write(
                struct.pack(
                    "<qiiiI",
                    d.anchor_day,
                    d.n_users,
                    int(d.influencer_ids.shape[0]),
                    d.k_actual,
                    flags,
                )
            )
            fh.write(d.user_ids.astype("<i4").tobytes())
            fh.write(d.influencer_ids.astype("<i4").tobytes())
            fh.write(d.sigma.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(d.scores, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(d.rotation, dtype="<f8").tobytes())
        fh.write(struct.pack("<i", len(decomps.skipped)))
        for anchor, reason in decomps.skipped:
            code = _SKIP_TOO_FEW if reason == _SKIP_REASONS[_SKIP_TOO_FEW] else _SKIP_EMPTY
            fh.write(struct.pack("<qI", anchor, code))


def load_decompositions(path, expected_digest: bytes | None = None) -> DecompositionSet:
    """Read a decomposition cache, verifying magic, version, and (optionally)
    the configuration digest it was written under."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CACHE_MAGIC:
            raise DataError(f"not a decomposition cache (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CACHE_VERSION:
            raise DataError(f"decomposition cache version {version} unsupported (want {_CACHE_VERSION})")
        digest = fh.read(32)
        if expected_digest is not None and digest != expected_digest:
            raise DataError("decomposition cache was written under a different configuration")
        seed, k_window, n_windows = struct.unpack("<qii", fh.read(16))
        windows = []
        for _ in range(n_windows):
            anchor, n_users, n_infl, k_actual, flags = struct.unpack("<qiiiI", fh.read(24))
            user_ids = np.frombuffer(fh.read(4 * n_users), dtype="<i4").astype(np.int32)
            infl_ids = np.frombuffer(fh.read(4 * n_infl), dtype="<i4").astype(np.int32)
            sigma = np.frombuffer(fh.read(8 * k_window), dtype="<f8").astype(np.float64)
            scores = np.frombuffer(fh.read(8 * n_users * k_window), dtype="<f8").reshape(n_users, k_window).astype(np.float64)
            rotation = np.frombuffer(fh.read(8 * n_infl * k_actual), dtype="<f8").reshape(n_infl, k_actual).astype(np.float64)
            windows.append(
                WindowDecomposition(
                    anchor_day=anchor,
                    user_ids=user_ids,
                    influencer_ids=infl_ids,
                    sigma=sigma,
                    scores=scores,
                    rotation=rotation,
                    k_actual=k_actual,
                    padded=bool(flags & 1),
                )
            )
        (n_skipped,) = struct.unpack("<i", fh.read(4))
        skipped = []
        for _ in range(n_skipped):
            anchor, code = struct.unpack("<qI", fh.read(12))
            skipped.append((anchor, _SKIP_REASONS.get(code, "unknown")))
    return DecompositionSet(windows=windows, skipped=skipped, k_window=k_window, seed=seed)
