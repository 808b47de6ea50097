"""
Encoding, PCA, OPTICS and concept assembly
"""
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.cluster import OPTICS
from sklearn.neighbors import NearestNeighbors

from config import (
    DEFAULT_MIN_CONCEPT_SIZE,
    DEFAULT_OPTICS_MIN_SAMPLES,
    DEFAULT_OPTICS_XI,
    OPTICS_EDGE_RATIO,
    OPTICS_MIN_SEPARATION,
)
from src.backend import ActivationVector, ModelBackend, map_images
from src.composition import ConceptImage
from src.dataset import Image
from src.errors import SpaceError

if TYPE_CHECKING:
    from src.tcav import TCAVResult

logger = logging.getLogger(__name__)

NOISE = -1

# (start, end) positions in the OPTICS ordering, both inclusive
Interval = Tuple[int, int]


class ClusteringError(SpaceError):
    """Raised for invalid PCA, OPTICS or k-means parameters"""

    pass


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def transform(self, vectors) -> np.ndarray:
        return (as_matrix(vectors) - self.mean) @ self.components.T

    def inverse_transform(self, reduced: np.ndarray) -> np.ndarray:
        return np.asarray(reduced) @ self.components + self.mean


@dataclass(frozen=True)
class Concept:
    """A cluster of concept images, optionally with its test result"""

    concept_id: int
    examples: Tuple[ConceptImage, ...]
    member_activations: Tuple[ActivationVector, ...]
    result: Optional["TCAVResult"] = None

    @property
    def size(self) -> int:
        return len(self.examples)

    @property
    def score(self) -> Optional[float]:
        return None if self.result is None else self.result.mean_score

    @property
    def significant(self) -> bool:
        return self.result is not None and bool(self.result.significant)


def as_matrix(vectors) -> np.ndarray:
    """Stack activation vectors (or raw arrays) into an (n, d) matrix"""
    if isinstance(vectors, np.ndarray):
        matrix = np.asarray(vectors, dtype=np.float64)
    else:
        rows = [
            v.values if isinstance(v, ActivationVector) else np.asarray(v, dtype=np.float64) for v in vectors
        ]
        if not rows:
            raise ClusteringError("No vectors given")
        lengths = {row.shape[0] for row in rows}
        if len(lengths) != 1:
            raise ClusteringError(f"Vectors have different lengths: {sorted(lengths)}")
        matrix = np.vstack(rows)
    if matrix.ndim != 2:
        raise ClusteringError(f"Expected a 2-D matrix, got shape {matrix.shape}")
    return matrix


def encode(
    concept_images: Sequence[Union[ConceptImage, Image]],
    backend: ModelBackend,
    layer_activ: str,
    workers: int = 1,
) -> List[ActivationVector]:
    """Activations of every concept image at layer_activ, in order"""

    def _one(item):
        image = item.as_image() if isinstance(item, ConceptImage) else item
        return backend.activations(image, layer_activ)

    return map_images(backend, _one, concept_images, workers)


def pca_fit_transform(vectors, n_pca: int) -> Tuple[PcaModel, np.ndarray]:
    """
    Principal components of the centered vectors

    Components are ordered by explained variance and signed so that the
    entry of largest magnitude is positive.
    """
    matrix = as_matrix(vectors)
    n_samples, dimension = matrix.shape
    if n_pca < 1 or n_pca > min(n_samples - 1, dimension):
        raise ClusteringError(
            f"n_pca={n_pca} must be between 1 and min(n_samples - 1, dimension) = "
            f"{min(n_samples - 1, dimension)}"
        )

    mean = matrix.mean(axis=0)
    centered = matrix - mean
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    variance = singular ** 2 / (n_samples - 1)
    total = variance.sum()

    components = vt[:n_pca].copy()
    pivots = np.argmax(np.abs(components), axis=1)
    flip = components[np.arange(n_pca), pivots] < 0
    components[flip] *= -1.0

    explained = variance[:n_pca]
    ratio = explained / total if total > 0 else np.zeros_like(explained)
    model = PcaModel(mean, components, explained, ratio)
    logger.debug("PCA kept %d components, %.3f of the variance", n_pca, ratio.sum())
    return model, centered @ components.T


def _relabel(labels: np.ndarray) -> np.ndarray:
    """Renumber clusters 0..m-1 by first occurrence"""
    relabeled = np.full_like(labels, NOISE)
    mapping = {}
    for i, label in enumerate(labels):
        if label == NOISE:
            continue
        if label not in mapping:
            mapping[label] = len(mapping)
        relabeled[i] = mapping[label]
    return relabeled


def _canonical_order(matrix: np.ndarray, min_samples: int) -> np.ndarray:
    """
    Densest point first, ties by coordinates

    OPTICS starts its walk at the first row and breaks reachability ties by
    row index, so running it on this order makes the result a function of
    the point set alone.
    """
    neighbors = NearestNeighbors(n_neighbors=min_samples, metric="manhattan").fit(matrix)
    core = neighbors.kneighbors(matrix)[0][:, -1]
    keys = [matrix[:, j] for j in reversed(range(matrix.shape[1]))]
    return np.lexsort(keys + [core])


def _peel_edges(start: int, end: int, density: np.ndarray, ratio: float, atol: float) -> Interval:
    """
    Drop members at either end of an ordering interval whose density
    distance is more than `ratio` times the interval median

    Xi clusters begin at the top of a steep descent and end at the top of a
    steep rise, so the point reached across a gap can sit on either edge.
    """
    values = density[start : end + 1]
    finite = values[np.isfinite(values)]
    limit = ratio * (float(np.median(finite)) if finite.size else 0.0) + atol
    while start < end and density[start] > limit:
        start += 1
    while end > start and density[end] > limit:
        end -= 1
    return start, end


def _separation(interval: Interval, plot: np.ndarray, atol: float) -> float:
    """Reachability on the way in and out over the largest reachability inside"""
    start, end = interval
    boundary = min(plot[start], plot[end + 1])
    inner = float(np.max(plot[start + 1 : end + 1])) if end > start else 0.0
    if inner <= atol:
        return np.inf
    return boundary / inner


def _outermost(intervals: Sequence[Interval]) -> List[Interval]:
    chosen = []
    for start, end in sorted(intervals, key=lambda iv: (iv[0] - iv[1], iv[0])):
        if all(end < s or start > e for s, e in chosen):
            chosen.append((start, end))
    return chosen


def _select_clusters(
    intervals: Sequence[Interval], plot: np.ndarray, min_separation: float, atol: float
) -> List[Interval]:
    """
    Pick clusters from the xi hierarchy, outermost first

    A cluster gives way to the clusters picked inside it when one of them is
    more sharply separated than it is. Clusters separated by less than
    min_separation never stand on their own. A cluster with infinite
    reachability on both sides (the whole data set, or a component cut off
    by max_eps) gives way to any picked sub-cluster.
    """
    separation = {iv: _separation(iv, plot, atol) for iv in intervals}
    picked = {}
    for start, end in sorted(intervals, key=lambda iv: (iv[1] - iv[0], iv[0])):
        inside = [iv for iv in picked if start <= iv[0] and iv[1] <= end]
        below = [iv for outer in _outermost(inside) for iv in picked[outer]]
        own = separation[(start, end)]
        if np.isinf(min(plot[start], plot[end + 1])):
            picked[(start, end)] = below or [(start, end)]
        elif own < min_separation or any(separation[iv] > own for iv in below):
            picked[(start, end)] = below
        else:
            picked[(start, end)] = [(start, end)]
    return sorted(iv for outer in _outermost(list(picked)) for iv in picked[outer])


def optics_cluster(
    points,
    min_samples: int = DEFAULT_OPTICS_MIN_SAMPLES,
    xi: float = DEFAULT_OPTICS_XI,
    max_eps: float = np.inf,
    edge_ratio: float = OPTICS_EDGE_RATIO,
    min_separation: float = OPTICS_MIN_SEPARATION,
) -> np.ndarray:
    """
    OPTICS ordering under the Manhattan distance, clusters by xi steepness

    Clusters come from the whole xi hierarchy rather than its leaves, so a
    blob is not split at every small wiggle of its reachability plot.
    Returns one label per point, -1 for noise; the partition does not depend
    on the order of the input rows.
    """
    matrix = as_matrix(points)
    if min_samples < 2:
        raise ClusteringError(f"min_samples must be at least 2, got {min_samples}")
    if not 0.0 < xi < 1.0:
        raise ClusteringError(f"xi must be in (0, 1), got {xi}")
    if max_eps is None:
        max_eps = np.inf
    if max_eps <= 0:
        raise ClusteringError(f"max_eps must be positive, got {max_eps}")
    if matrix.shape[0] < min_samples:
        logger.info("Only %d points for min_samples=%d: all noise", matrix.shape[0], min_samples)
        return np.full(matrix.shape[0], NOISE, dtype=int)

    order = _canonical_order(matrix, min_samples)
    model = OPTICS(
        min_samples=min_samples,
        max_eps=max_eps,
        metric="manhattan",
        cluster_method="xi",
        xi=xi,
    ).fit(matrix[order])

    plot = np.append(model.reachability_[model.ordering_], np.inf)
    density = np.minimum(model.reachability_, model.core_distances_)[model.ordering_]
    finite = density[np.isfinite(density)]
    atol = 1e-9 * (1.0 + (np.abs(finite).max() if finite.size else 0.0))

    intervals = set()
    for start, end in model.cluster_hierarchy_:
        start, end = _peel_edges(int(start), int(end), density, edge_ratio, atol)
        if end - start + 1 >= min_samples:
            intervals.add((start, end))
    chosen = _select_clusters(sorted(intervals), plot, min_separation, atol)
    logger.debug("Xi hierarchy: %d clusters, %d picked", len(model.cluster_hierarchy_), len(chosen))

    by_position = np.full(matrix.shape[0], NOISE, dtype=int)
    for label, (start, end) in enumerate(chosen):
        by_position[start : end + 1] = label
    labels = np.full(matrix.shape[0], NOISE, dtype=int)
    labels[order[model.ordering_]] = by_position
    labels = _relabel(labels)
    logger.info(
        "OPTICS found %d clusters, %d noise points",
        len(set(labels.tolist()) - {NOISE}),
        int(np.sum(labels == NOISE)),
    )
    return labels


def assemble_concepts(
    labels: Sequence[int],
    concept_images: Sequence[ConceptImage],
    activations: Sequence[ActivationVector],
    min_size: int = DEFAULT_MIN_CONCEPT_SIZE,
) -> List[Concept]:
    """
    One Concept per non-noise cluster with at least min_size members

    Ids follow descending size, ties by first occurrence.
    """
    labels = np.asarray(labels, dtype=int)
    if not len(labels) == len(concept_images) == len(activations):
        raise ClusteringError(
            f"labels ({len(labels)}), images ({len(concept_images)}) and "
            f"activations ({len(activations)}) differ in length"
        )

    groups = {}
    for i, label in enumerate(labels):
        if label != NOISE:
            groups.setdefault(int(label), []).append(i)

    kept = [members for members in groups.values() if len(members) >= min_size]
    kept.sort(key=lambda members: (-len(members), members[0]))

    concepts = [
        Concept(
            concept_id=concept_id,
            examples=tuple(concept_images[i] for i in members),
            member_activations=tuple(activations[i] for i in members),
        )
        for concept_id, members in enumerate(kept)
    ]
    logger.info(
        "Assembled %d concepts (%d clusters below min size %d)",
        len(concepts),
        len(groups) - len(concepts),
        min_size,
    )
    return concepts


def effective_n_pca(requested: int, n_samples: int, dimension: int) -> int:
    """Largest usable component count not above the requested one"""
    limit = min(n_samples - 1, dimension)
    if limit < 1:
        raise ClusteringError(f"Cannot run PCA on {n_samples} samples")
    if requested > limit:
        logger.warning(
            "n_pca=%d reduced to %d (samples: %d, dimension: %d)",
            requested,
            limit,
            n_samples,
            dimension,
        )
        return limit
    return requested
