"""Centroid/divergence/toxicity series, smoothing, and series output."""

import math
from fractions import Fraction

import numpy as np
import pytest

from polarscope import dynamics, ingest
from polarscope.dynamics import (
    GAP_DIVERGENCE,
    GAP_TOXICITY,
    CentroidSeries,
    build_series,
    centroid_series,
    day_to_date,
    divergence_series,
    format_value,
    gaussian_smooth,
    joint_toxicity,
    toxicity_series,
    window_toxicity,
    write_series,
)
from polarscope.errors import ConfigError, DataError
from polarscope.spectral import SampleSpace, SampleStack

from conftest import DAY0, load_csv


# ---------------------------------------------------------------------------
# window toxicity (complement product)
# ---------------------------------------------------------------------------


def test_window_toxicity_single_post():
    assert window_toxicity(np.array([1.0]), np.array([0.4])) == pytest.approx(0.4, rel=1e-12)


def test_window_toxicity_two_posts():
    got = window_toxicity(np.array([0.5, 0.5]), np.array([0.5, 0.5]))
    assert got == pytest.approx(1.0 - 0.75**2, rel=1e-12)


def test_window_toxicity_all_zero_scores():
    assert window_toxicity(np.array([0.3, 0.7]), np.zeros(2)) == 0.0


def test_window_toxicity_saturating_post():
    assert window_toxicity(np.array([1.0]), np.array([1.0])) == 1.0


def test_window_toxicity_empty_is_gap_error():
    with pytest.raises(DataError):
        window_toxicity(np.array([]), np.array([]))


def test_window_toxicity_fraction_oracle_and_order_invariance():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 21))
        shares = rng.dirichlet(np.ones(n))
        scores = rng.random(n)
        got = window_toxicity(shares, scores)
        prod = Fraction(1)
        for f, t in zip(shares, scores):
            prod *= 1 - Fraction(f) * Fraction(t)
        assert abs(got - float(1 - prod)) <= 1e-12
        perm = rng.permutation(n)
        assert window_toxicity(shares[perm], scores[perm]) == pytest.approx(got, abs=1e-12)


# ---------------------------------------------------------------------------
# joint toxicity
# ---------------------------------------------------------------------------


def test_joint_toxicity_identity_and_absorbing():
    t = np.array([[0.0, 0.3, 1.0]])
    mask = np.ones((1, 3), dtype=bool)
    tj, pm = joint_toxicity(t, mask)
    assert tj[0, 0, 1] == pytest.approx(0.3)  # 0 is the identity element
    assert tj[0, 2, 1] == pytest.approx(1.0)  # 1 absorbs
    assert tj[0, 1, 1] == pytest.approx(1.0 - 0.7**2)
    np.testing.assert_allclose(tj[0], tj[0].T)


def test_joint_toxicity_dominates_components():
    rng = np.random.default_rng(1)
    t = rng.random((5, 3))
    mask = np.ones((5, 3), dtype=bool)
    tj, _ = joint_toxicity(t, mask)
    for a in range(3):
        for b in range(3):
            assert (tj[:, a, b] >= np.maximum(t[:, a], t[:, b]) - 1e-12).all()


def test_joint_toxicity_gap_propagation():
    t = np.array([[0.5, 0.4]])
    mask = np.array([[True, False]])
    tj, pm = joint_toxicity(t, mask)
    assert not pm[0, 0, 1] and not pm[0, 1, 0]
    assert np.isnan(tj[0, 0, 1])
    assert pm[0, 0, 0]


# ---------------------------------------------------------------------------
# centroids and divergence
# ---------------------------------------------------------------------------


def _fabricated(projections, user_ids, row_offsets, anchors, anchors_all, k=2):
    proj = np.asarray(projections, dtype=np.float64)
    dim = proj.shape[1]
    space = SampleSpace(
        rotation=np.eye(dim),
        singular_values=np.ones(dim),
        explained_variance_ratio=np.ones(dim) / dim,
        k_sample=dim,
        projections=proj,
        col_mean=np.zeros(dim),
        col_sd=np.ones(dim),
    )
    stack = SampleStack(
        s=proj.copy(),
        col_mean=np.zeros(dim),
        col_sd=np.ones(dim),
        zero_sd=np.zeros(dim, dtype=bool),
        anchors=np.asarray(anchors, dtype=np.int64),
        row_offsets=np.asarray(row_offsets, dtype=np.int64),
        user_ids=np.asarray(user_ids, dtype=np.int64),
    )
    return stack, space


def test_centroid_series_single_member_and_gaps():
    # window 1: user0 (cluster 0) alone; window 2 absent from the stack
    stack, space = _fabricated(
        projections=[[1.0, 2.0], [0.0, 4.0], [0.0, 2.0]],
        user_ids=[0, 1, 2],
        row_offsets=[0, 1, 3],
        anchors=[DAY0, DAY0 + 1],
        anchors_all=None,
    )
    labels = np.array([0, 1, 1])
    anchors_all = np.array([DAY0, DAY0 + 1, DAY0 + 2])
    cent = centroid_series(stack, space, labels, anchors_all, n_clusters=2)
    np.testing.assert_allclose(cent.centroids[0, 0], [1.0, 2.0])
    assert np.isnan(cent.centroids[0, 1]).all()  # cluster 1 inactive in window 1
    np.testing.assert_allclose(cent.centroids[1, 1], [0.0, 3.0])  # mean of the two members
    assert cent.counts[1, 1] == 2
    assert not cent.window_present[2]
    assert np.isnan(cent.centroids[2]).all()


def test_centroid_series_outliers_ignored():
    stack, space = _fabricated(
        projections=[[1.0, 0.0], [9.0, 9.0]],
        user_ids=[0, 1],
        row_offsets=[0, 2],
        anchors=[DAY0],
        anchors_all=None,
    )
    labels = np.array([0, -1])
    cent = centroid_series(stack, space, labels, np.array([DAY0]), n_clusters=1)
    np.testing.assert_allclose(cent.centroids[0, 0], [1.0, 0.0])


def test_centroid_series_shift_linearity():
    rng = np.random.default_rng(2)
    proj = rng.standard_normal((6, 2))
    stack, space = _fabricated(
        projections=proj,
        user_ids=[0, 1, 2, 3, 4, 5],
        row_offsets=[0, 6],
        anchors=[DAY0],
        anchors_all=None,
    )
    labels = np.array([0, 0, 0, 1, 1, 1])
    base = centroid_series(stack, space, labels, np.array([DAY0]), n_clusters=2)
    shift = np.array([0.5, -1.5])
    stack2, space2 = _fabricated(proj + shift, [0, 1, 2, 3, 4, 5], [0, 6], [DAY0], None)
    moved = centroid_series(stack2, space2, labels, np.array([DAY0]), n_clusters=2)
    np.testing.assert_allclose(moved.centroids[0], base.centroids[0] + shift, atol=1e-12)


def test_divergence_hand_values():
    cent = CentroidSeries(
        anchors=np.array([DAY0]),
        centroids=np.array([[[1.0, 0.0], [2.0, 0.0], [0.0, 3.0], [-1.0, 0.0]]]),
        counts=np.ones((1, 4), dtype=np.int64),
        window_present=np.array([True]),
    )
    div, mask = divergence_series(cent)
    assert div[0, 0, 1] == pytest.approx(-1.0)  # same direction
    assert div[0, 0, 2] == pytest.approx(0.0, abs=1e-12)  # orthogonal
    assert div[0, 0, 3] == pytest.approx(1.0)  # opposite
    assert div[0, 0, 0] == pytest.approx(-1.0)  # diagonal
    np.testing.assert_allclose(div[0], div[0].T, atol=1e-12)
    assert mask[0].all()


def test_divergence_zero_centroid_is_gap():
    cent = CentroidSeries(
        anchors=np.array([DAY0]),
        centroids=np.array([[[0.0, 0.0], [1.0, 0.0]]]),
        counts=np.array([[2, 1]], dtype=np.int64),
        window_present=np.array([True]),
    )
    div, mask = divergence_series(cent)
    assert not mask[0, 0, 1]
    assert np.isnan(div[0, 0, 1])
    assert mask[0, 1, 1]


# ---------------------------------------------------------------------------
# toxicity series over a store
# ---------------------------------------------------------------------------


def _toxicity_fixture():
    # users: a0, a1 in cluster 0; b0 in cluster 1.  One shared post.
    rows = []
    for d in range(10):
        rows.append((d, "a0", "i1", f"pa{d}", ""))
        rows.append((d, "a1", "i1", f"pa{d}", ""))
        rows.append((d, "b0", "i2", f"pb{d}", ""))
        if d % 2 == 0:
            rows.append((d, "b0", "i1", f"pa{d}", ""))  # b0 retweets cluster-0's post
    store = load_csv(rows)
    scores = {}
    for d in range(10):
        scores[f"pa{d}"] = 0.2 + 0.05 * d
        scores[f"pb{d}"] = 0.6
    posts = ingest.join_toxicity(store, scores, min_retweets=1)
    labels = np.array([0, 0, 1])  # users sorted: a0, a1, b0
    return store, posts, labels


def test_toxicity_series_matches_brute_force():
    store, posts, labels = _toxicity_fixture()
    anchors_all = np.arange(DAY0, DAY0 + 10)
    t, mask = toxicity_series(store, posts, labels, anchors_all, window_days=7)
    assert t.shape == (10, 2)
    for a_idx, anchor in enumerate(anchors_all):
        inside = (store.day >= anchor - 6) & (store.day <= anchor)
        for c in range(2):
            member_rows = inside & (labels[store.retweeter] == c) & posts.scored_eligible[store.post]
            pids = store.post[member_rows]
            if pids.size == 0:
                assert not mask[a_idx, c]
                continue
            uniq, cnt = np.unique(pids, return_counts=True)
            shares = cnt / cnt.sum()
            expected = window_toxicity(shares, posts.scores[uniq])
            assert t[a_idx, c] == pytest.approx(expected, abs=1e-12)
            assert mask[a_idx, c]


def test_toxicity_series_unscored_posts_excluded():
    store, posts, labels = _toxicity_fixture()
    # score only the pb posts: cluster 0 touches pa posts exclusively -> all gap
    scores = {f"pb{d}": 0.5 for d in range(10)}
    posts2 = ingest.join_toxicity(store, scores, min_retweets=1)
    t, mask = toxicity_series(store, posts2, labels, np.arange(DAY0, DAY0 + 10), window_days=7)
    assert not mask[:, 0].any()
    assert mask[:, 1].all()
    np.testing.assert_allclose(t[mask[:, 1], 1], 0.5, atol=1e-12)


def test_toxicity_series_needs_clusters():
    store, posts, _ = _toxicity_fixture()
    with pytest.raises(DataError):
        toxicity_series(store, posts, np.array([-1, -1, -1]), np.arange(DAY0, DAY0 + 3), 7)


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------


def test_gaussian_smooth_preserves_constants():
    values = np.full(40, 0.7)
    mask = np.ones(40, dtype=bool)
    np.testing.assert_allclose(gaussian_smooth(values, mask, sigma=3.0), 0.7, atol=1e-12)


def _kernel_oracle(values, mask, sigma, pos):
    radius = int(math.ceil(3.0 * sigma))
    num = den = 0.0
    for j in range(-radius, radius + 1):
        i = pos + j
        if 0 <= i < len(values) and mask[i]:
            w = math.exp(-(j**2) / (2.0 * sigma**2))
            num += w * values[i]
            den += w
    return num / den


def test_gaussian_smooth_impulse_matches_kernel_sum():
    n = 41
    values = np.zeros(n)
    values[20] = 1.0
    mask = np.ones(n, dtype=bool)
    out = gaussian_smooth(values, mask, sigma=3.0)
    for pos in (20, 0, 40, 15):
        assert out[pos] == pytest.approx(_kernel_oracle(values, mask, 3.0, pos), rel=1e-12)


def test_gaussian_smooth_edge_renormalizes():
    rng = np.random.default_rng(3)
    values = rng.random(30)
    mask = np.ones(30, dtype=bool)
    out = gaussian_smooth(values, mask, sigma=3.0)
    for pos in (0, 1, 29):
        assert out[pos] == pytest.approx(_kernel_oracle(values, mask, 3.0, pos), rel=1e-12)


def test_gaussian_smooth_gaps_excluded_not_zeroed():
    values = np.array([1.0, 1.0, 1e9, 1.0, 1.0])
    mask = np.array([True, True, False, True, True])
    out = gaussian_smooth(values, mask, sigma=1.0)
    np.testing.assert_allclose(out[mask], 1.0, atol=1e-12)  # gap value never leaks
    assert np.isnan(out[2])


def test_gaussian_smooth_sigma_validation():
    with pytest.raises(ConfigError):
        gaussian_smooth(np.ones(5), np.ones(5, dtype=bool), sigma=0.0)


# ---------------------------------------------------------------------------
# assembled table and CSV output
# ---------------------------------------------------------------------------


def _full_table():
    store, posts, labels = _toxicity_fixture()
    anchors_all = np.arange(DAY0, DAY0 + 10)
    proj = np.array([[1.0, 0.1 * w] for w in range(10) for _ in range(2)])
    user_ids = np.array([0, 2] * 10)  # a0 and b0 active every window
    stack, space = None, None
    stack, space = _fabricated_for_table(proj, user_ids, anchors_all)
    return build_series(stack, space, labels, anchors_all, store, posts, window_days=7, n_clusters=2, sigma=2.0)


def _fabricated_for_table(proj, user_ids, anchors_all):
    dim = proj.shape[1]
    space = SampleSpace(
        rotation=np.eye(dim),
        singular_values=np.ones(dim),
        explained_variance_ratio=np.ones(dim) / dim,
        k_sample=dim,
        projections=proj,
        col_mean=np.zeros(dim),
        col_sd=np.ones(dim),
    )
    n_w = len(anchors_all)
    stack = SampleStack(
        s=proj.copy(),
        col_mean=np.zeros(dim),
        col_sd=np.ones(dim),
        zero_sd=np.zeros(dim, dtype=bool),
        anchors=np.asarray(anchors_all, dtype=np.int64),
        row_offsets=np.arange(0, 2 * n_w + 1, 2, dtype=np.int64),
        user_ids=np.asarray(user_ids, dtype=np.int64),
    )
    return stack, space


def test_build_series_ranges_and_consistency():
    table = _full_table()
    d = table.divergence[table.divergence_mask]
    assert ((d >= -1 - 1e-9) & (d <= 1 + 1e-9)).all()
    t = table.toxicity[table.toxicity_mask]
    assert ((t >= 0) & (t <= 1)).all()
    tj, tjm = table.joint, table.joint_mask
    for c1, c2 in table.pairs():
        ok = tjm[:, c1, c2]
        assert (
            tj[ok, c1, c2] >= np.maximum(table.toxicity[ok, c1], table.toxicity[ok, c2]) - 1e-12
        ).all()
        np.testing.assert_allclose(tj[ok, c1, c2], tj[ok, c2, c1])


def test_write_series_layout_and_gap_flags(tmp_path):
    table = _full_table()
    paths = write_series(table, str(tmp_path))
    names = {p.split("/")[-1] for p in paths}
    assert names == {"cluster_0.csv", "cluster_1.csv", "pair_0-1.csv"}
    cluster0 = (tmp_path / "cluster_0.csv").read_text().splitlines()
    assert cluster0[0] == "date,T_raw,T_smooth,gap_flags"
    assert cluster0[1].startswith(day_to_date(DAY0) + ",")
    pair = (tmp_path / "pair_0-1.csv").read_text().splitlines()
    assert pair[0] == "date,D_raw,D_smooth,T_joint_raw,T_joint_smooth,gap_flags"
    assert len(pair) == 11
    flags = [int(line.split(",")[-1]) for line in pair[1:]]
    for i, f in enumerate(flags):
        assert bool(f & GAP_DIVERGENCE) == (not table.divergence_mask[i, 0, 1])
        assert bool(f & GAP_TOXICITY) == (not table.joint_mask[i, 0, 1])


def test_write_series_rerun_byte_identical(tmp_path):
    table = _full_table()
    a_dir = tmp_path / "a"
    b_dir = tmp_path / "b"
    write_series(table, str(a_dir))
    write_series(table, str(b_dir))
    for name in ("cluster_0.csv", "cluster_1.csv", "pair_0-1.csv"):
        assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()


def test_day_to_date():
    assert day_to_date(DAY0) == "2021-01-01"
    assert day_to_date(0) == "1970-01-01"


def test_format_value_round_trip():
    rng = np.random.default_rng(4)
    for x in rng.standard_normal(50):
        assert float(format_value(float(x))) == float(x)
    assert format_value(float("nan")) == ""
