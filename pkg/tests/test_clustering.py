import numpy as np
import pytest
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from src.backend import POOL_LAYER, ActivationVector
from src.clustering import (
    NOISE,
    ClusteringError,
    _peel_edges,
    _select_clusters,
    _separation,
    as_matrix,
    assemble_concepts,
    effective_n_pca,
    encode,
    optics_cluster,
    pca_fit_transform,
)
from src.composition import ConceptImage


def _point_blob(center, count=9):
    """count copies of one point; duplicates give a flat reachability plot"""
    return np.tile(np.asarray(center, dtype=float), (count, 1))


def _gaussian_blob(center, count, seed):
    return np.random.default_rng(seed).normal(center, 1.0, size=(count, 2))


def _partition(labels, indices):
    """Clusters as sets of original point indices, noise left out"""
    groups = {}
    for label, index in zip(labels, indices):
        if label != NOISE:
            groups.setdefault(label, set()).add(int(index))
    return {frozenset(members) for members in groups.values()}


def _same_partition(labels, other):
    return _partition(labels, range(len(labels))) == _partition(other, range(len(other)))


def _eps_components(points, eps, min_size):
    """Brute-force clusters: connected components of the Manhattan eps-graph"""
    adjacency = csr_matrix(cdist(points, points, metric="cityblock") <= eps)
    _, components = connected_components(adjacency, directed=False)
    labels = np.full(len(points), NOISE)
    for component in np.unique(components):
        members = np.flatnonzero(components == component)
        if len(members) >= min_size:
            labels[members] = component
    return labels


def _agreement(labels, truth):
    """Share of points whose label maps to the majority truth label of its cluster"""
    agree = 0
    for label in np.unique(labels):
        members = truth[labels == label]
        if label == NOISE:
            agree += int(np.sum(members == NOISE))
        else:
            values, counts = np.unique(members, return_counts=True)
            agree += int(counts.max()) if values[np.argmax(counts)] != NOISE else 0
    return agree / len(truth)


def _concepts_inputs(n):
    images = [ConceptImage(np.zeros((2, 2, 3)), f"img_{i}.png", (0, 0, 2, 2)) for i in range(n)]
    activations = [ActivationVector(np.full(3, float(i)), POOL_LAYER, f"img_{i}.png") for i in range(n)]
    return images, activations


class TestPca:
    """
    Tests for PCA against a brute-force eigendecomposition
    """

    def test_matches_covariance_eigendecomposition(self):
        """Test 100 random matrices: eigenvalues, orthonormality, reconstruction"""
        rng = np.random.default_rng(6)

        for _ in range(100):
            n = int(rng.integers(3, 51))
            d = int(rng.integers(2, 21))
            matrix = rng.normal(size=(n, d)) * rng.uniform(0.5, 3.0, size=d)
            n_pca = min(n - 1, d)

            model, reduced = pca_fit_transform(matrix, n_pca)

            eigenvalues = np.sort(np.linalg.eigh(np.cov(matrix, rowvar=False))[0])[::-1]
            np.testing.assert_allclose(model.explained_variance, eigenvalues[:n_pca], atol=1e-8)
            np.testing.assert_allclose(model.components @ model.components.T, np.eye(n_pca), atol=1e-6)
            assert np.max(np.abs(model.inverse_transform(reduced) - matrix)) < 1e-6

    def test_sign_convention(self):
        """Test each component's largest-magnitude entry is positive"""
        matrix = np.random.default_rng(1).normal(size=(30, 6))

        model, _ = pca_fit_transform(matrix, 4)

        for component in model.components:
            assert component[np.argmax(np.abs(component))] > 0

    def test_transform_matches_fit(self):
        """Test transform reproduces the fitted projection"""
        matrix = np.random.default_rng(2).normal(size=(20, 5))

        model, reduced = pca_fit_transform(matrix, 3)

        np.testing.assert_allclose(model.transform(matrix), reduced)
        assert model.n_components == 3
        assert model.explained_variance_ratio.sum() <= 1.0 + 1e-12

    def test_accepts_activation_vectors(self):
        """Test activation vectors are stacked in order"""
        vectors = [ActivationVector(np.array([i, 2.0 * i, 1.0]), POOL_LAYER) for i in range(5)]

        _, reduced = pca_fit_transform(vectors, 1)

        assert reduced.shape == (5, 1)

    @pytest.mark.parametrize("n_pca", [0, 10])
    def test_n_pca_range(self, n_pca):
        """Test n_pca above min(n - 1, d) or below 1 is rejected"""
        with pytest.raises(ClusteringError, match="n_pca"):
            pca_fit_transform(np.random.default_rng(0).normal(size=(6, 8)), n_pca)

    def test_effective_n_pca_clamps(self, caplog):
        """Test the usable component count is capped with a warning"""
        assert effective_n_pca(30, 12, 64) == 11
        assert "reduced" in caplog.text
        assert effective_n_pca(10, 200, 64) == 10
        with pytest.raises(ClusteringError):
            effective_n_pca(5, 1, 64)

    def test_mixed_lengths(self):
        """Test vectors of different lengths are rejected"""
        with pytest.raises(ClusteringError, match="different lengths"):
            as_matrix([np.zeros(3), np.zeros(4)])


class TestOptics:
    """
    Tests for OPTICS clustering
    """

    def test_two_spread_blobs(self):
        """Test two spread-1 blobs come out whole, matching the eps-components oracle"""
        points = np.vstack([_gaussian_blob((0, 0), 20, seed=0), _gaussian_blob((100, 100), 20, seed=1)])

        labels = optics_cluster(points, min_samples=3)

        assert list(labels) == [0] * 20 + [1] * 20
        assert _same_partition(labels, _eps_components(points, eps=10.0, min_size=3))

    def test_three_gaussian_blobs_with_outliers(self):
        """Test three blobs plus ten outliers with default parameters"""
        rng = np.random.default_rng(17)
        centers = np.array([[0.0, 0.0], [40.0, 0.0], [0.0, 40.0]])
        blobs = [rng.normal(center, 1.0, size=(40, 2)) for center in centers]
        outliers = []
        while len(outliers) < 10:
            candidate = rng.uniform(-200.0, 240.0, size=2)
            far_from_centers = np.all(np.abs(centers - candidate).sum(axis=1) >= 80)
            far_from_others = all(np.abs(candidate - o).sum() >= 40 for o in outliers)
            if far_from_centers and far_from_others:
                outliers.append(candidate)
        points = np.vstack(blobs + [np.array(outliers)])
        truth = np.concatenate([np.full(40, i) for i in range(3)] + [np.full(10, NOISE)])

        labels = optics_cluster(points)
        oracle = _eps_components(points, eps=10.0, min_size=10)

        assert len(set(labels.tolist()) - {NOISE}) == 3
        assert np.all(labels[-10:] == NOISE)
        assert _agreement(labels, truth) >= 0.95
        assert _agreement(labels, oracle) >= 0.95
        assert len(set(oracle.tolist()) - {NOISE}) == 3

    def test_isolated_point_is_noise(self):
        """Test a point far from a 20-point blob is noise"""
        points = np.vstack([_gaussian_blob((0, 0), 20, seed=4), [[1000.0, 1000.0]]])

        labels = optics_cluster(points)

        assert labels[-1] == NOISE
        assert set(labels[:-1].tolist()) <= {0, NOISE}
        assert np.sum(labels[:-1] == 0) >= 18

    def test_identical_points_single_cluster(self):
        """Test identical points form one cluster without noise"""
        assert list(optics_cluster(np.ones((12, 3)))) == [0] * 12

    def test_point_blobs_and_isolated_point(self):
        """Test two blobs of repeated points become two clusters and a far point is noise"""
        points = np.vstack([_point_blob((0, 0)), _point_blob((50, 50)), [[200.0, -200.0]]])

        labels = optics_cluster(points, min_samples=5)

        assert list(labels[:9]) == [0] * 9
        assert list(labels[9:18]) == [1] * 9
        assert labels[18] == NOISE

    def test_partition_ignores_input_order(self):
        """Test shuffled inputs give the same partition up to renaming"""
        points = np.vstack([_gaussian_blob((0, 0), 30, seed=2), _gaussian_blob((100, 100), 30, seed=3)])
        expected = _partition(optics_cluster(points), np.arange(len(points)))
        rng = np.random.default_rng(5)

        for _ in range(10):
            order = rng.permutation(len(points))
            labels = optics_cluster(points[order])

            assert _partition(labels, order) == expected
        assert len(expected) == 2

    def test_labels_follow_first_occurrence(self):
        """Test cluster ids are renumbered in order of first appearance"""
        points = np.vstack([_point_blob((80, 80)), _point_blob((0, 0))])
        order = np.random.default_rng(3).permutation(len(points))

        labels = optics_cluster(points[order], min_samples=5)

        assert labels[0] == 0
        assert set(labels.tolist()) == {0, 1}

    def test_too_few_points(self):
        """Test fewer points than min_samples are all noise"""
        assert list(optics_cluster(np.zeros((3, 2)), min_samples=5)) == [NOISE] * 3

    @pytest.mark.parametrize(
        "kwargs, message",
        [
            ({"min_samples": 1}, "min_samples"),
            ({"xi": 0.0}, "xi"),
            ({"xi": 1.0}, "xi"),
            ({"max_eps": 0.0}, "max_eps"),
        ],
    )
    def test_parameter_validation(self, kwargs, message):
        """Test invalid OPTICS parameters are rejected"""
        with pytest.raises(ClusteringError, match=message):
            optics_cluster(np.zeros((10, 2)), **kwargs)


class TestHierarchySelection:
    """
    Tests for picking clusters out of the xi hierarchy
    """

    def test_peel_far_end_member(self):
        """Test a far member at the end of an interval is dropped"""
        density = np.array([0.1, 1.0, 1.0, 1.1, 1.0, 40.0])

        assert _peel_edges(0, 5, density, ratio=8.0, atol=0.0) == (0, 4)

    def test_peel_far_start_member(self):
        """Test a far member at the start of an interval is dropped"""
        density = np.array([30.0, 1.0, 1.0, 1.1, 1.0, 2.5])

        assert _peel_edges(0, 5, density, ratio=8.0, atol=0.0) == (1, 5)

    def test_peel_keeps_duplicates(self):
        """Test repeated points with zero density distance are kept whole"""
        assert _peel_edges(0, 4, np.zeros(5), ratio=8.0, atol=1e-9) == (0, 4)

    def test_whole_data_gives_way_to_blobs(self):
        """Test the outermost cluster splits into its well-separated parts"""
        plot = np.array([np.inf, 1.0, 1.0, 1.0, 50.0, 1.0, 1.0, 1.0, np.inf])

        chosen = _select_clusters([(0, 3), (1, 3), (4, 7), (0, 7)], plot, 2.0, 0.0)

        assert chosen == [(0, 3), (4, 7)]

    def test_weak_fragments_stay_merged(self):
        """Test a blob is not split along a small reachability bump"""
        plot = np.array([np.inf, 1.0, 1.0, 1.0, 1.5, 1.0, 1.0, 1.0, 30.0, np.inf])

        chosen = _select_clusters([(0, 3), (4, 7), (0, 7), (0, 8)], plot, 2.0, 0.0)

        assert chosen == [(0, 7)]

    def test_sharper_sub_clusters_win(self):
        """Test a cluster splits when its parts are better separated than itself"""
        plot = np.array([np.inf, 1.0, 1.0, 1.0, 10.0, 1.0, 1.0, 1.0, 30.0, np.inf])

        chosen = _select_clusters([(0, 3), (4, 7), (0, 7)], plot, 2.0, 0.0)

        assert chosen == [(0, 3), (4, 7)]

    def test_separation_ratio(self):
        """Test separation is the smaller edge reachability over the largest inner one"""
        plot = np.array([np.inf, 1.0, 2.0, 1.0, 10.0, 1.0, np.inf])

        assert _separation((0, 3), plot, 0.0) == 5.0
        assert _separation((4, 5), plot, 0.0) == 10.0
        assert _separation((0, 5), plot, 0.0) == np.inf


class TestAssembleConcepts:
    """
    Tests for building concepts from cluster labels
    """

    def test_ids_by_size_and_small_clusters_dropped(self):
        """Test concept ids follow descending size; small clusters and noise are dropped"""
        labels = [0, 0, 0, 0, 1, 1, 1, 1, 1, NOISE, 2, 2]
        images, activations = _concepts_inputs(len(labels))

        concepts = assemble_concepts(labels, images, activations, min_size=4)

        assert [c.concept_id for c in concepts] == [0, 1]
        assert [c.size for c in concepts] == [5, 4]
        assert [e.source_id for e in concepts[0].examples] == [f"img_{i}.png" for i in range(4, 9)]
        assert concepts[1].member_activations[0].values[0] == 0.0
        assert concepts[0].result is None
        assert concepts[0].score is None
        assert not concepts[0].significant

    def test_equal_sizes_by_first_occurrence(self):
        """Test equal-sized clusters keep their order of first appearance"""
        labels = [1, 0, 1, 0, 1, 0, 1, 0]
        images, activations = _concepts_inputs(len(labels))

        concepts = assemble_concepts(labels, images, activations, min_size=4)

        assert concepts[0].examples[0].source_id == "img_0.png"
        assert concepts[1].examples[0].source_id == "img_1.png"

    def test_length_mismatch(self):
        """Test labels, images and activations must align"""
        images, activations = _concepts_inputs(3)
        with pytest.raises(ClusteringError, match="differ in length"):
            assemble_concepts([0, 0], images, activations)


def test_encode_keeps_order(blob_backend, noise_images):
    """Test encode returns one activation per image, in order"""
    activations = encode(noise_images[:4], blob_backend, POOL_LAYER, workers=2)

    assert [a.source for a in activations] == [img.source_id for img in noise_images[:4]]
    assert all(len(a) == 64 for a in activations)
