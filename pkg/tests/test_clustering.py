"""Density clustering, exemplar prediction, and cluster summaries."""

import numpy as np
import pytest
from scipy.cluster import hierarchy
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial.distance import squareform
from sklearn.metrics import adjusted_rand_score

from polarscope import density
from polarscope.clustering import (
    ClusterAssignment,
    cluster_summary,
    default_min_cluster_size,
    fit_clusters,
    predict_clusters,
)
from polarscope.errors import ConfigError, DataError
from polarscope.ingest import filter_users
from polarscope.spectral import UserVectors
from polarscope.synth import adjusted_rand_index, sphere_blobs, uniform_sphere

from conftest import load_csv


def make_vectors(unit_points, scale=100.0):
    """Wrap unit-sphere points as UserVectors with large raw norms."""
    unit = np.asarray(unit_points, dtype=np.float64)
    n = unit.shape[0]
    return UserVectors(
        raw=unit * scale,
        norms=np.full(n, scale),
        unit=unit,
        window_counts=np.full(n, 3, dtype=np.int64),
        aggregation="sum",
        excluded=0,
    )


# ---------------------------------------------------------------------------
# end-to-end clustering behavior
# ---------------------------------------------------------------------------


def test_two_blobs_recovered_exactly():
    points, truth = sphere_blobs(500, centers=2, dim=4, spread=0.1, separation_deg=90.0, seed=0)
    model = fit_clusters(make_vectors(points), tau=10.0, min_cluster_size=25, min_samples=10)
    assert model.n_clusters == 2
    ari = adjusted_rand_index(truth, model.fit_labels)
    assert ari >= 0.99


def test_uniform_noise_never_overclusters():
    ok = 0
    for seed in range(100):
        points = uniform_sphere(300, dim=4, seed=seed)
        fit = density.fit(points, min_samples=10, min_cluster_size=50)
        n_clusters = int(fit.labels.max()) + 1 if fit.labels.size else 0
        assert n_clusters <= 2
        if n_clusters <= 1:
            ok += 1
    assert ok >= 95


def test_single_blob_gets_one_cluster():
    points, _ = sphere_blobs(200, centers=1, dim=4, spread=0.05, seed=1)
    model = fit_clusters(make_vectors(points), tau=10.0, min_cluster_size=50, min_samples=10)
    assert model.n_clusters == 1
    assert isinstance(model.fallback, bool)


def test_fit_determinism():
    points, _ = sphere_blobs(150, centers=2, dim=4, seed=2)
    a = fit_clusters(make_vectors(points), tau=10.0, min_cluster_size=25, min_samples=10)
    b = fit_clusters(make_vectors(points), tau=10.0, min_cluster_size=25, min_samples=10)
    np.testing.assert_array_equal(a.fit_labels, b.fit_labels)
    np.testing.assert_array_equal(a.exemplar_vectors, b.exemplar_vectors)


def test_fit_input_order_invariance():
    points, _ = sphere_blobs(150, centers=2, dim=4, seed=3)
    rng = np.random.default_rng(0)
    perm = rng.permutation(points.shape[0])
    a = fit_clusters(make_vectors(points), tau=10.0, min_cluster_size=25, min_samples=10)
    b = fit_clusters(make_vectors(points[perm]), tau=10.0, min_cluster_size=25, min_samples=10)
    assert adjusted_rand_index(a.fit_labels[perm], b.fit_labels) == pytest.approx(1.0)


def test_scale_invariance_with_matching_tau():
    """Scaling every raw vector by a positive constant (and tau with it)
    leaves the partition unchanged: clustering sees only directions."""
    points, _ = sphere_blobs(150, centers=2, dim=4, seed=4)
    a = fit_clusters(make_vectors(points, scale=100.0), tau=10.0, min_cluster_size=25, min_samples=10)
    b = fit_clusters(make_vectors(points, scale=300.0), tau=30.0, min_cluster_size=25, min_samples=10)
    np.testing.assert_array_equal(a.fit_labels, b.fit_labels)


def test_tau_monotone_fit_subset():
    rng = np.random.default_rng(5)
    points, _ = sphere_blobs(200, centers=2, dim=4, seed=5)
    vectors = make_vectors(points)
    vectors.norms[:] = rng.uniform(0.0, 100.0, size=points.shape[0])
    vectors.raw[:] = vectors.unit * vectors.norms[:, None]
    lo = fit_clusters(vectors, tau=5.0, min_cluster_size=25, min_samples=10)
    hi = fit_clusters(vectors, tau=40.0, min_cluster_size=25, min_samples=10)
    assert set(hi.fit_rows.tolist()) <= set(lo.fit_rows.tolist())


def test_fit_too_few_above_tau_is_data_error():
    points, _ = sphere_blobs(30, centers=2, dim=4, seed=6)
    with pytest.raises(DataError) as exc:
        fit_clusters(make_vectors(points, scale=1.0), tau=10.0, min_cluster_size=25, min_samples=5)
    assert "tau" in str(exc.value)


def test_fit_negative_tau_rejected():
    points, _ = sphere_blobs(60, centers=2, dim=4, seed=7)
    with pytest.raises(ConfigError):
        fit_clusters(make_vectors(points), tau=-1.0, min_cluster_size=25, min_samples=5)


def test_default_min_cluster_size():
    assert default_min_cluster_size(1000) == 50
    assert default_min_cluster_size(100_000) == 500


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def _fitted_blobs(seed=8):
    points, truth = sphere_blobs(200, centers=2, dim=4, spread=0.08, seed=seed)
    vectors = make_vectors(points)
    model = fit_clusters(vectors, tau=10.0, min_cluster_size=25, min_samples=10)
    return points, truth, vectors, model


def test_predict_passes_fit_labels_through():
    _, _, vectors, model = _fitted_blobs()
    assignment = predict_clusters(model, vectors)
    np.testing.assert_array_equal(assignment.labels[model.fit_rows], model.fit_labels)
    assert set(assignment.provenance[model.fit_rows].tolist()) == {0}


def test_predict_coincident_with_exemplar():
    points, _, _, model = _fitted_blobs()
    extra = np.vstack([points, model.exemplar_vectors[:1]])
    vectors = make_vectors(extra)
    vectors.norms[-1] = 1.0  # below tau: predicted, not fit
    assignment = predict_clusters(model, vectors)
    assert assignment.labels[-1] == model.exemplar_clusters[0]
    assert assignment.provenance[-1] == 1


def test_predict_far_point_stays_outlier():
    points, _, _, model = _fitted_blobs()
    far = -points[:1]  # antipodal to a cluster-0 member: far from everything
    far = np.vstack([points, far])
    vectors = make_vectors(far)
    vectors.norms[-1] = 1.0
    assignment = predict_clusters(model, vectors)
    assert assignment.labels[-1] == -1


def test_predict_zero_vector_stays_outlier():
    points, _, _, model = _fitted_blobs()
    ext = np.vstack([points, np.zeros((1, 4))])
    vectors = make_vectors(ext)
    vectors.norms[-1] = 0.0
    assignment = predict_clusters(model, vectors)
    assert assignment.labels[-1] == -1


def test_assignment_bookkeeping():
    _, truth, vectors, model = _fitted_blobs()
    assignment = predict_clusters(model, vectors)
    assert int(assignment.sizes.sum()) + assignment.n_outliers == vectors.n_users
    assert adjusted_rand_index(truth, assignment.labels) >= 0.99
    rows = list(assignment.as_rows([f"u{i}" for i in range(vectors.n_users)]))
    assert len(rows) == vectors.n_users
    assert all(prov in ("fit", "predicted") for _, _, prov in rows)


# ---------------------------------------------------------------------------
# density internals against independent oracles
# ---------------------------------------------------------------------------


def test_core_distances_hand_case():
    points = np.array([[0.0], [1.0], [3.0], [7.0]])
    core = density.core_distances(points, min_samples=2)
    # distance to the 2nd-nearest other point: 0->{1,3}, 1->{1,2}, 3->{2,3}, 7->{4,6}
    np.testing.assert_allclose(core, [3.0, 2.0, 3.0, 6.0])


def test_core_distances_small_n_rejected():
    with pytest.raises(DataError):
        density.core_distances(np.zeros((3, 2)), min_samples=3)


def test_mst_total_weight_matches_scipy():
    rng = np.random.default_rng(9)
    points = rng.standard_normal((40, 3))
    core = density.core_distances(points, min_samples=4)
    edges = density.mutual_reachability_mst(points, core)
    dist = np.linalg.norm(points[:, None] - points[None, :], axis=2)
    mreach = np.maximum(dist, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(mreach, 0.0)
    oracle = minimum_spanning_tree(mreach).sum()
    assert edges[:, 2].sum() == pytest.approx(oracle, rel=1e-9)
    assert edges.shape == (39, 3)


def test_single_linkage_matches_scipy():
    rng = np.random.default_rng(10)
    points = rng.standard_normal((30, 3))
    core = np.zeros(30)  # zero core distances: plain Euclidean single linkage
    edges = density.mutual_reachability_mst(points, core)
    dendro = density.single_linkage(edges, 30)
    oracle = hierarchy.linkage(squareform(np.linalg.norm(points[:, None] - points[None, :], axis=2)), method="single")
    np.testing.assert_allclose(np.sort(dendro[:, 2]), np.sort(oracle[:, 2]), rtol=1e-9)
    np.testing.assert_allclose(dendro[-1, 3], 30)


def test_condense_tree_invariants():
    points, _ = sphere_blobs(100, centers=2, dim=3, spread=0.1, seed=11)
    core = density.core_distances(points, min_samples=5)
    edges = density.mutual_reachability_mst(points, core)
    dendro = density.single_linkage(edges, 200)
    tree = density.condense_tree(dendro, 200, min_cluster_size=20)
    n = 200
    point_rows = tree.child < n
    # every point departs exactly once
    departed = tree.child[point_rows]
    assert len(set(departed.tolist())) == len(departed)
    # cluster rows nest: child size < parent size, lambdas non-negative
    assert (tree.lam >= 0).all()
    sizes = {int(c): int(s) for c, s in zip(tree.child[~point_rows], tree.size[~point_rows])}
    for c, s in sizes.items():
        assert s >= 20


def test_condense_min_cluster_size_validation():
    with pytest.raises(ConfigError):
        density.condense_tree(np.zeros((1, 4)), 2, min_cluster_size=1)


def test_select_eom_two_blobs():
    points, truth = sphere_blobs(100, centers=2, dim=3, spread=0.08, seed=12)
    fit = density.fit(points, min_samples=5, min_cluster_size=20)
    assert int(fit.labels.max()) + 1 == 2
    assert adjusted_rand_score(truth, fit.labels) >= 0.99
    assert not fit.fallback
    assert fit.stability.shape == (2,)
    assert (fit.stability > 0).all()


def test_density_fit_exemplars_belong_to_their_cluster():
    points, _ = sphere_blobs(100, centers=2, dim=3, spread=0.08, seed=13)
    fit = density.fit(points, min_samples=5, min_cluster_size=20)
    for cluster, rows in enumerate(fit.exemplars):
        assert len(rows) > 0
        assert set(fit.labels[rows].tolist()) == {cluster}


# ---------------------------------------------------------------------------
# cluster summary
# ---------------------------------------------------------------------------


def _summary_fixture():
    rows = []
    for d in range(3):
        for j in range(3):
            rows.append((d, f"a{j}", "ia", f"pa{d}{j}", "atag;shared"))
        for j in range(2):
            rows.append((d, f"b{j}", "ib", f"pb{d}{j}", "btag"))
    rows.append((0, "outlier_u", "ia", "po", "atag"))
    store = load_csv(rows)
    index, sub = filter_users(store, ["atag", "btag", "shared"], min_matches=1)
    labels = np.full(len(index.users), -1, dtype=np.int32)
    for i, name in enumerate(index.users):
        if name.startswith("a"):
            labels[i] = 0
        elif name.startswith("b"):
            labels[i] = 1
    assignment = ClusterAssignment(
        labels=labels,
        provenance=np.zeros(len(index.users), dtype=np.uint8),
        n_clusters=2,
    )
    return assignment, sub, index


def test_cluster_summary_partition_identity():
    assignment, store, index = _summary_fixture()
    summary = cluster_summary(assignment, store, index)
    assert summary.partition_total() == len(index.users)
    np.testing.assert_array_equal(summary.sizes, [3, 2])
    assert summary.n_outliers == 1
    assert summary.event_counts.sum() + summary.outlier_event_count == store.n_events
    assert (summary.sizes > 0).all()


def test_cluster_summary_top_users_sorted():
    assignment, store, index = _summary_fixture()
    summary = cluster_summary(assignment, store, index, top_users=2)
    for per_cluster in summary.top_users:
        counts = [c for _, c in per_cluster]
        assert counts == sorted(counts, reverse=True)
        assert len(per_cluster) <= 2


def test_cluster_summary_tag_accounting():
    assignment, store, index = _summary_fixture()
    summary = cluster_summary(assignment, store, index)
    tag_of = {t: i for i, t in enumerate(summary.tag_names)}
    a_tag = tag_of["atag"]
    # occurrences: cluster members' events carrying the tag
    assert summary.tag_occurrences[0][a_tag] == 9
    assert a_tag not in summary.tag_occurrences[1]
    # distinct users
    assert summary.tag_user_counts[0][a_tag] == 3
    shared = tag_of["shared"]
    assert summary.tag_user_counts[0][shared] == 3
    # brute-force cross-check for every (cluster, tag) pair
    for c in range(2):
        members = {i for i in range(len(index.users)) if assignment.labels[i] == c}
        expected = {}
        for ev in range(store.n_events):
            if int(store.retweeter[ev]) in members:
                lo, hi = store.tag_offsets[ev], store.tag_offsets[ev + 1]
                for t in store.tag_ids[lo:hi]:
                    expected[int(t)] = expected.get(int(t), 0) + 1
        got = {int(k): v for k, v in summary.tag_occurrences[c].items()}
        assert got == {int(k): v for k, v in expected.items()}
