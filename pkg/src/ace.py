"""
ACE baseline: superpixel segmentation, padding and k-means concepts
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from skimage.segmentation import slic
from sklearn.cluster import KMeans

from config import (
    DEFAULT_COMPACTNESS,
    DEFAULT_KMEANS_RESTARTS,
    DEFAULT_SIGMA,
    KMEANS_MAX_ITERATIONS,
    KMEANS_TOLERANCE,
    SLIC_MAX_ITERATIONS,
)
from src.backend import ModelBackend
from src.clustering import (
    ClusteringError,
    Concept,
    as_matrix,
    assemble_concepts,
    effective_n_pca,
    encode,
    pca_fit_transform,
)
from src.composition import ConceptImage, RandomConceptSet, whole_image_concept
from src.config_validator import RunConfig
from src.dataset import (
    Image,
    LabeledDataset,
    class_subset,
    other_classes,
    preprocess,
    resize_pixels,
)
from src.errors import stage
from src.patches import ExtractionError
from src.tcav import default_set_size, score_concepts

logger = logging.getLogger(__name__)

# rng substream tag for whole-image random sets
WHOLE_IMAGE_STREAM = 31


@dataclass(frozen=True)
class Superpixel:
    """Connected pixel region; bbox is (row0, col0, row1, col1), ends exclusive"""

    coords: np.ndarray
    bbox: Tuple[int, int, int, int]
    source_id: str
    label: int

    @property
    def area(self) -> int:
        return self.coords.shape[0]


def slic_segment(
    image: Image,
    n_segments: int,
    compactness: float = DEFAULT_COMPACTNESS,
    sigma: float = DEFAULT_SIGMA,
) -> List[Superpixel]:
    """SLIC superpixels of one image, in label order"""
    if n_segments < 1:
        raise ExtractionError(f"n_segments must be positive, got {n_segments}")
    if n_segments > image.height * image.width:
        raise ExtractionError(
            f"n_segments={n_segments} exceeds the pixel count of '{image.source_id}'"
        )
    labels = slic(
        image.pixels,
        n_segments=n_segments,
        compactness=compactness,
        sigma=sigma,
        max_num_iter=SLIC_MAX_ITERATIONS,
        enforce_connectivity=True,
        start_label=0,
        channel_axis=-1,
    )

    superpixels = []
    for label in np.unique(labels):
        coords = np.argwhere(labels == label)
        r0, c0 = coords.min(axis=0)
        r1, c1 = coords.max(axis=0) + 1
        bbox = (int(r0), int(c0), int(r1), int(c1))
        superpixels.append(Superpixel(coords, bbox, image.source_id, int(label)))

    if not n_segments / 2 <= len(superpixels) <= 2 * n_segments:
        logger.debug(
            "SLIC produced %d segments for n_segments=%d on %s",
            len(superpixels),
            n_segments,
            image.source_id,
        )
    return superpixels


def pad_and_resize(
    image: Image, superpixel: Superpixel, pad_value: Union[float, str], input_side: int
) -> ConceptImage:
    """
    Crop the superpixel's bounding box, fill pixels outside the superpixel
    and resample to the input side with bicubic interpolation

    pad_value is on the 0..255 scale, or "mean" for the per-channel mean of
    the superpixel's own pixels.
    """
    r0, c0, r1, c1 = superpixel.bbox
    region = np.array(image.pixels[r0:r1, c0:c1], copy=True)
    inside = np.zeros(region.shape[:2], dtype=bool)
    inside[superpixel.coords[:, 0] - r0, superpixel.coords[:, 1] - c0] = True

    if pad_value == "mean":
        fill = region[inside].mean(axis=0)
    else:
        fill = np.full(3, float(pad_value) / 255.0)
    region[~inside] = fill

    resized = np.clip(resize_pixels(region, input_side, input_side, "bicubic"), 0.0, 1.0)
    return ConceptImage(resized, superpixel.source_id, superpixel.bbox)


def kmeans(points, n_k: int, seed: int, restarts: int = DEFAULT_KMEANS_RESTARTS) -> np.ndarray:
    """k-means++ with restarts; labels of the lowest-inertia run"""
    matrix = as_matrix(points)
    if n_k < 1:
        raise ClusteringError(f"n_k must be positive, got {n_k}")
    if n_k > matrix.shape[0]:
        raise ClusteringError(f"n_k={n_k} exceeds the number of points ({matrix.shape[0]})")
    model = KMeans(
        n_clusters=n_k,
        init="k-means++",
        n_init=restarts,
        max_iter=KMEANS_MAX_ITERATIONS,
        tol=KMEANS_TOLERANCE,
        random_state=seed % (2 ** 32),
    )
    labels = model.fit_predict(matrix)
    logger.debug("k-means with %d clusters, inertia %.4g", n_k, model.inertia_)
    return labels.astype(int)


def build_whole_image_randoms(
    others: Sequence[Image], n_sets: int, set_size: int, seed: int, input_side: int
) -> List[RandomConceptSet]:
    """Random concept sets made of complete out-of-class images"""
    if not others:
        raise ExtractionError("No out-of-class images to build random concepts from")
    sets = []
    for set_id in range(n_sets):
        rng = np.random.default_rng([seed, WHOLE_IMAGE_STREAM, set_id])
        index = rng.choice(len(others), size=set_size, replace=len(others) < set_size)
        members = tuple(whole_image_concept(others[i], input_side) for i in index)
        sets.append(RandomConceptSet(set_id, members))
    return sets


def superpixel_candidates(
    images: Sequence[Image],
    n_slic: Sequence[int],
    compactness: float,
    sigma: float,
    pad_value: Union[float, str],
    input_side: int,
) -> List[ConceptImage]:
    """Padded superpixels of every image at every resolution, merged"""
    candidates = []
    for image in images:
        for n_segments in n_slic:
            for superpixel in slic_segment(image, n_segments, compactness, sigma):
                candidates.append(pad_and_resize(image, superpixel, pad_value, input_side))
    logger.info(
        "Built %d superpixel candidates from %d images (n_slic=%s)",
        len(candidates),
        len(images),
        list(n_slic),
    )
    return candidates


def run_ace(
    dataset: LabeledDataset,
    k: int,
    backend: ModelBackend,
    config: RunConfig,
    timings: Optional[Dict[str, float]] = None,
) -> List[Concept]:
    """
    ACE baseline end to end: superpixels at every n_slic resolution, PCA,
    k-means, then the same TCAV test as SPACE against random sets of
    complete out-of-class images
    """
    side = backend.descriptor.input_side
    with stage("load", timings):
        class_images = [preprocess(image, side) for image in class_subset(dataset, k)]
        others = [preprocess(image, side) for image in other_classes(dataset, k)]
        if not class_images:
            raise ExtractionError(f"Class {k} has no images")

    with stage("extract", timings):
        candidates = superpixel_candidates(
            class_images, config.n_slic, config.compactness, config.sigma, config.pad_value, side
        )

    with stage("encode", timings):
        activations = encode(candidates, backend, config.layer_activ, config.workers)

    with stage("cluster", timings):
        n_pca = effective_n_pca(config.n_pca, len(activations), len(activations[0]))
        _, reduced = pca_fit_transform(activations, n_pca)
        n_k = config.n_k
        if n_k > len(candidates):
            logger.warning("n_k=%d reduced to the %d candidates", n_k, len(candidates))
            n_k = len(candidates)
        labels = kmeans(reduced, n_k, config.seed, config.kmeans_restarts)
        concepts = assemble_concepts(labels, candidates, activations, config.min_concept_size)

    with stage("random", timings):
        set_size = default_set_size(concepts, config.random_set_size)
        randoms = build_whole_image_randoms(others, config.n_random_concepts, set_size, config.seed, side)

    with stage("test", timings):
        return score_concepts(
            concepts,
            randoms,
            class_images,
            backend,
            config.layer_activ,
            k,
            repetitions=config.tcav_repetitions,
            alpha=config.alpha,
            seed=config.seed,
            min_size=config.min_concept_size,
            workers=config.workers,
        )
