"""
Concept extraction run: load, explain, extract, cluster, test
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from src.ace import run_ace
from src.backend import BackendError, ModelBackend, map_images
from src.clustering import (
    Concept,
    assemble_concepts,
    effective_n_pca,
    encode,
    optics_cluster,
    pca_fit_transform,
)
from src.composition import build_random_concepts, tile_to_input
from src.config_validator import ConfigValidationError, RunConfig
from src.dataset import LabeledDataset, class_subset, load_dataset, other_classes, preprocess
from src.errors import stage
from src.patches import ExtractionError, top_patches
from src.saliency import gradcam
from src.tcav import default_set_size, score_concepts

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunResult:
    config: RunConfig
    concepts: Tuple[Concept, ...]
    class_name: str
    timings: Dict[str, float] = field(default_factory=dict, compare=False)

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def method(self) -> str:
        return self.config.method


def run_space(
    dataset: LabeledDataset,
    k: int,
    backend: ModelBackend,
    config: RunConfig,
    timings: Optional[Dict[str, float]] = None,
) -> List[Concept]:
    """SPACE: saliency-ranked tiled patches, PCA + OPTICS, TCAV test"""
    side = backend.descriptor.input_side
    with stage("load", timings):
        class_images = [preprocess(image, side) for image in class_subset(dataset, k)]
        others = [preprocess(image, side) for image in other_classes(dataset, k)]
        if not class_images:
            raise ExtractionError(f"Class {k} has no images")

    with stage("saliency", timings):
        saliencies = map_images(
            backend,
            lambda image: gradcam(image, k, config.layer_gradcam, backend),
            class_images,
            config.workers,
        )

    with stage("extract", timings):
        patches = [
            patch
            for image, saliency in zip(class_images, saliencies)
            for patch in top_patches(image, saliency, config.n_s, config.n_p)
        ]
        logger.info("Selected %d patches from %d images", len(patches), len(class_images))

    with stage("compose", timings):
        concept_images = [tile_to_input(patch, side) for patch in patches]

    with stage("encode", timings):
        activations = encode(concept_images, backend, config.layer_activ, config.workers)

    with stage("cluster", timings):
        n_pca = effective_n_pca(config.n_pca, len(activations), len(activations[0]))
        _, reduced = pca_fit_transform(activations, n_pca)
        labels = optics_cluster(
            reduced,
            min_samples=config.optics_min_samples,
            xi=config.optics_xi,
            max_eps=config.optics_max_eps,
        )
        concepts = assemble_concepts(labels, concept_images, activations, config.min_concept_size)

    with stage("random", timings):
        set_size = default_set_size(concepts, config.random_set_size)
        randoms = build_random_concepts(
            others, config.n_s, config.n_random_concepts, set_size, config.seed, side
        )

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


METHODS = {"SPACE": run_space, "ACE": run_ace}


def run(
    config: RunConfig,
    backend: ModelBackend,
    dataset_root: Optional[Union[str, Path]] = None,
) -> RunResult:
    """
    Full run for config.class_index

    dataset_root overrides config.dataset. Any stage failure is raised as
    StageError carrying the stage name.
    """
    root = dataset_root if dataset_root is not None else config.dataset
    if root is None:
        raise ConfigValidationError("Validation Errors:\n  ERROR: No dataset given")
    if config.input_side is not None and config.input_side != backend.descriptor.input_side:
        raise BackendError(
            f"Config input_side {config.input_side} does not match the backend "
            f"input side {backend.descriptor.input_side}"
        )

    timings: Dict[str, float] = {}
    with stage("load", timings):
        dataset = load_dataset(root)
        # raises DatasetError for an out-of-range class index
        class_subset(dataset, config.class_index)
        class_name = dataset.class_names[config.class_index]

    logger.info(
        "Running %s on class %d ('%s') with seed %d",
        config.method,
        config.class_index,
        class_name,
        config.seed,
    )
    concepts = METHODS[config.method](dataset, config.class_index, backend, config, timings)
    return RunResult(config, tuple(concepts), class_name, timings)
