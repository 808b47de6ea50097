"""
Concept activation vectors and the TCAV significance test

A CAV is the unit normal of a logistic separator between concept and
random activations. The TCAV score of a class is the fraction of its
images whose logit increases along the CAV. Scores from repeated random
draws are compared to a random-vs-random baseline with Welch's t-test.
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.special import expit

from config import (
    CAV_DEGENERATE_NORM,
    CAV_LEARNING_RATE,
    CAV_STEPS,
    DEFAULT_ALPHA,
    DEFAULT_MIN_CONCEPT_SIZE,
    DEFAULT_TCAV_REPETITIONS,
    MIN_RANDOM_SET_SIZE,
)
from src.backend import ActivationVector, ModelBackend
from src.clustering import Concept, as_matrix, encode
from src.composition import RandomConceptSet
from src.dataset import Image
from src.errors import SpaceError

logger = logging.getLogger(__name__)

# rng substream tags
CONCEPT_STREAM = 21
BASELINE_STREAM = 22


class ConceptTestError(SpaceError):
    """Raised for unusable TCAV inputs"""

    pass


@dataclass(frozen=True)
class CAV:
    direction: np.ndarray
    layer_id: str
    training_accuracy: float
    degenerate: bool = False


@dataclass(frozen=True)
class TCAVResult:
    concept_id: int
    per_run_scores: Tuple[float, ...]
    random_baseline_scores: Tuple[float, ...]
    mean_score: Optional[float]
    p_value: Optional[float]
    significant: bool
    testable: bool = True


def train_cav(
    pos: Sequence[ActivationVector],
    neg: Sequence[ActivationVector],
    rng: np.random.Generator,
    steps: int = CAV_STEPS,
    learning_rate: float = CAV_LEARNING_RATE,
) -> CAV:
    """
    Logistic regression by full-batch gradient descent from zero

    pos is labelled 1, neg 0. A separator whose weights stay numerically
    zero gives a random unit direction and is flagged degenerate.
    """
    if not pos or not neg:
        raise ConceptTestError("CAV training needs positive and negative examples")
    layers = {a.layer_id for a in pos} | {a.layer_id for a in neg}
    if len(layers) != 1:
        raise ConceptTestError(f"CAV examples come from different layers: {sorted(layers)}")
    layer_id = layers.pop()

    features = np.vstack([as_matrix(pos), as_matrix(neg)])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    weights = np.zeros(features.shape[1])
    bias = 0.0
    n = features.shape[0]
    for _ in range(steps):
        residual = expit(features @ weights + bias) - labels
        weights -= learning_rate * (features.T @ residual) / n
        bias -= learning_rate * residual.mean()

    predicted = expit(features @ weights + bias) >= 0.5
    accuracy = float(np.mean(predicted == labels.astype(bool)))

    norm = np.linalg.norm(weights)
    if norm < CAV_DEGENERATE_NORM:
        logger.warning("Degenerate CAV on layer '%s': using a random direction", layer_id)
        direction = rng.standard_normal(features.shape[1])
        return CAV(direction / np.linalg.norm(direction), layer_id, accuracy, degenerate=True)
    return CAV(weights / norm, layer_id, accuracy)


def sensitivity(activation: ActivationVector, k: int, cav: CAV, backend: ModelBackend) -> float:
    """Directional derivative of logit k along the CAV"""
    if activation.layer_id != cav.layer_id:
        raise ConceptTestError(
            f"Activation layer '{activation.layer_id}' differs from CAV layer '{cav.layer_id}'"
        )
    _, gradient = backend.logit_from_activation(activation, k)
    return float(gradient @ cav.direction)


def tcav_score(sensitivities: Sequence[float]) -> float:
    """Fraction of strictly positive sensitivities"""
    values = np.asarray(sensitivities, dtype=np.float64)
    if values.size == 0:
        raise ConceptTestError("TCAV score of an empty set of sensitivities")
    return float(np.mean(values > 0.0))


def welch_ttest(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """
    Two-sided Welch t-test (t statistic, p-value)

    With zero variance on both sides the p-value is 1.0 for equal means and
    0.0 otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ConceptTestError("Welch t-test needs at least two values per population")
    if np.var(a) == 0.0 and np.var(b) == 0.0:
        if a.mean() == b.mean():
            return 0.0, 1.0
        return (np.inf if a.mean() > b.mean() else -np.inf), 0.0
    result = stats.ttest_ind(a, b, equal_var=False)
    return float(result.statistic), float(result.pvalue)


def gradient_matrix(
    class_activations: Sequence[ActivationVector], k: int, backend: ModelBackend
) -> np.ndarray:
    """Logit gradients of every class image, one row each"""
    if not class_activations:
        raise ConceptTestError("No class images to score")
    return np.vstack([backend.logit_from_activation(a, k)[1] for a in class_activations])


def _score(gradients: np.ndarray, cav: CAV) -> float:
    return tcav_score(gradients @ cav.direction)


def _sample(items: Sequence, size: int, rng: np.random.Generator) -> list:
    index = rng.choice(len(items), size=size, replace=len(items) < size)
    return [items[i] for i in index]


def random_activations(
    randoms: Sequence[RandomConceptSet], backend: ModelBackend, layer_activ: str, workers: int = 1
) -> Dict[int, List[ActivationVector]]:
    return {r.set_id: encode(r.members, backend, layer_activ, workers) for r in randoms}


def random_baseline(
    random_acts: Dict[int, List[ActivationVector]],
    gradients: np.ndarray,
    repetitions: int,
    sample_size: int,
    seed: int,
) -> List[float]:
    """TCAV scores of CAVs trained between two different random sets"""
    set_ids = sorted(random_acts)
    if len(set_ids) < 2:
        raise ConceptTestError("The random baseline needs at least two random sets")
    scores = []
    for repetition in range(repetitions):
        rng = np.random.default_rng([seed, BASELINE_STREAM, repetition])
        first, second = rng.choice(len(set_ids), size=2, replace=False)
        pos = _sample(random_acts[set_ids[first]], sample_size, rng)
        neg = _sample(random_acts[set_ids[second]], sample_size, rng)
        scores.append(_score(gradients, train_cav(pos, neg, rng)))
    return scores


def test_concept(
    concept: Concept,
    randoms: Sequence[RandomConceptSet],
    class_images: Sequence[Image],
    backend: ModelBackend,
    layer_activ: str,
    k: int,
    repetitions: int = DEFAULT_TCAV_REPETITIONS,
    alpha: float = DEFAULT_ALPHA,
    seed: int = 0,
    min_size: int = DEFAULT_MIN_CONCEPT_SIZE,
    class_activations: Optional[Sequence[ActivationVector]] = None,
    random_acts: Optional[Dict[int, List[ActivationVector]]] = None,
    baseline_scores: Optional[Sequence[float]] = None,
    gradients: Optional[np.ndarray] = None,
) -> TCAVResult:
    """
    Test one concept against the random sets

    Repetition r trains a CAV between a sample of the concept and random
    set r (cycling), each draw from its own rng substream. Precomputed class
    activations, gradients, random activations and baseline scores can be
    passed to share them across concepts.
    """
    if concept.size < min_size:
        logger.warning(
            "Concept %d has %d examples (< %d): insufficient samples",
            concept.concept_id,
            concept.size,
            min_size,
        )
        return TCAVResult(concept.concept_id, (), (), None, None, False, testable=False)
    if repetitions < 2:
        raise ConceptTestError(f"At least two repetitions are needed, got {repetitions}")
    if len(randoms) < 2:
        raise ConceptTestError(f"At least two random sets are needed, got {len(randoms)}")

    if gradients is None:
        if class_activations is None:
            class_activations = encode(class_images, backend, layer_activ)
        gradients = gradient_matrix(class_activations, k, backend)
    if random_acts is None:
        random_acts = random_activations(randoms, backend, layer_activ)

    sample_size = min(concept.size, min(len(r) for r in randoms))
    examples = list(concept.member_activations)
    set_ids = sorted(random_acts)

    scores = []
    for repetition in range(repetitions):
        rng = np.random.default_rng([seed, CONCEPT_STREAM, concept.concept_id, repetition])
        pos = _sample(examples, sample_size, rng)
        neg = _sample(random_acts[set_ids[repetition % len(set_ids)]], sample_size, rng)
        scores.append(_score(gradients, train_cav(pos, neg, rng)))

    if baseline_scores is None:
        baseline_scores = random_baseline(random_acts, gradients, repetitions, sample_size, seed)
    _, p_value = welch_ttest(scores, baseline_scores)

    result = TCAVResult(
        concept_id=concept.concept_id,
        per_run_scores=tuple(scores),
        random_baseline_scores=tuple(float(s) for s in baseline_scores),
        mean_score=float(np.mean(scores)),
        p_value=p_value,
        significant=bool(p_value < alpha),
    )
    logger.info(
        "Concept %d: mean TCAV %.3f, p=%.4g%s",
        concept.concept_id,
        result.mean_score,
        p_value,
        " (significant)" if result.significant else "",
    )
    return result


# Not a pytest test function
test_concept.__test__ = False


def default_set_size(concepts: Sequence[Concept], configured: Optional[int] = None) -> int:
    """Configured size, else the median concept size but at least MIN_RANDOM_SET_SIZE"""
    if configured is not None:
        return configured
    if not concepts:
        return MIN_RANDOM_SET_SIZE
    return max(MIN_RANDOM_SET_SIZE, int(np.median([c.size for c in concepts])))


def score_concepts(
    concepts: Sequence[Concept],
    randoms: Sequence[RandomConceptSet],
    class_images: Sequence[Image],
    backend: ModelBackend,
    layer_activ: str,
    k: int,
    repetitions: int = DEFAULT_TCAV_REPETITIONS,
    alpha: float = DEFAULT_ALPHA,
    seed: int = 0,
    min_size: int = DEFAULT_MIN_CONCEPT_SIZE,
    workers: int = 1,
) -> List[Concept]:
    """
    Test every concept against one shared random population

    Class activations, logit gradients, random activations and the
    random-vs-random baseline are computed once. Returns the concepts with
    their results attached, by descending mean score (untestable last,
    ties by id).
    """
    if not concepts:
        return []
    class_activations = encode(class_images, backend, layer_activ, workers)
    gradients = gradient_matrix(class_activations, k, backend)
    random_acts = random_activations(randoms, backend, layer_activ, workers)
    sample_size = min(len(r) for r in randoms)
    baseline = random_baseline(random_acts, gradients, repetitions, sample_size, seed)

    tested = []
    for concept in concepts:
        result = test_concept(
            concept,
            randoms,
            class_images,
            backend,
            layer_activ,
            k,
            repetitions=repetitions,
            alpha=alpha,
            seed=seed,
            min_size=min_size,
            random_acts=random_acts,
            baseline_scores=baseline,
            gradients=gradients,
        )
        tested.append(replace(concept, result=result))

    tested.sort(key=lambda c: (c.score is None, -(c.score or 0.0), c.concept_id))
    return tested
