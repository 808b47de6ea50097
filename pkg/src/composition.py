"""
Concept images built by tiling patches, and random concept sets
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.dataset import Image, center_crop_square, preprocess
from src.patches import ExtractionError, Patch

logger = logging.getLogger(__name__)

# rng substream tag for random concept sets
RANDOM_SET_STREAM = 11


@dataclass(frozen=True)
class ConceptImage:
    """
    Model-sized image representing one candidate concept example

    region is the (row0, col0, row1, col1) window of the source image the
    content was taken from.
    """

    pixels: np.ndarray
    source_id: str
    region: Tuple[int, int, int, int]
    origin: Optional[Tuple[int, int]] = None
    is_random: bool = False

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float64, copy=True)
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def label(self) -> str:
        row, col = self.region[:2]
        return f"{self.source_id}@{row},{col}"

    def as_image(self) -> Image:
        return Image(self.pixels, self.label)


@dataclass(frozen=True)
class RandomConceptSet:
    set_id: int
    members: Tuple[ConceptImage, ...]

    def __len__(self) -> int:
        return len(self.members)


def tile(patch: Patch, n_s: int, input_side: Optional[int] = None) -> ConceptImage:
    """
    Repeat the patch on an n_s x n_s grid

    The canvas is center-cropped when it overshoots input_side; a canvas
    smaller than input_side is an error.
    """
    if n_s < 1:
        raise ExtractionError(f"n_s must be at least 1, got {n_s}")
    canvas = np.tile(patch.pixels, (n_s, n_s, 1))
    side = input_side if input_side is not None else canvas.shape[0]
    if canvas.shape[0] < side:
        raise ExtractionError(
            f"Tiled canvas {canvas.shape[0]} is smaller than the input side {side}"
        )
    if canvas.shape[0] > side:
        offset = (canvas.shape[0] - side) // 2
        canvas = canvas[offset : offset + side, offset : offset + side]
    return ConceptImage(canvas, patch.source_id, patch.region, patch.origin, is_random=False)


def tile_to_input(patch: Patch, input_side: int) -> ConceptImage:
    """Tile with as many repetitions as needed to cover input_side"""
    return tile(patch, math.ceil(input_side / patch.side), input_side)


def random_crop(image: Image, patch_side: int, rng: np.random.Generator) -> Patch:
    """Uniformly placed square crop"""
    if patch_side < 1 or patch_side > min(image.height, image.width):
        raise ExtractionError(
            f"Crop side {patch_side} does not fit image '{image.source_id}' "
            f"({image.height}x{image.width})"
        )
    top = int(rng.integers(0, image.height - patch_side + 1))
    left = int(rng.integers(0, image.width - patch_side + 1))
    pixels = image.pixels[top : top + patch_side, left : left + patch_side]
    return Patch(pixels, image.source_id, None, (top, left))


def build_random_concepts(
    others: Sequence[Image],
    n_s: int,
    n_sets: int,
    set_size: int,
    seed: int,
    input_side: Optional[int] = None,
) -> List[RandomConceptSet]:
    """
    Random concept sets from out-of-class images

    Each member is a random crop of a random image, tiled exactly like an
    extracted patch. Set i draws from its own rng substream.
    """
    if not others:
        raise ExtractionError("No out-of-class images to build random concepts from")
    if set_size < 3:
        raise ExtractionError(f"Random set size must be at least 3, got {set_size}")
    if n_sets < 1:
        raise ExtractionError(f"Number of random sets must be positive, got {n_sets}")

    side = input_side if input_side is not None else min(others[0].height, others[0].width)
    patch_side = side // n_s
    if patch_side == 0:
        raise ExtractionError(f"n_s={n_s} exceeds the input side {side}")

    sets = []
    for set_id in range(n_sets):
        rng = np.random.default_rng([seed, RANDOM_SET_STREAM, set_id])
        members = []
        for _ in range(set_size):
            image = others[int(rng.integers(len(others)))]
            crop = random_crop(image, patch_side, rng)
            tiled = tile_to_input(crop, side)
            members.append(
                ConceptImage(tiled.pixels, tiled.source_id, tiled.region, None, is_random=True)
            )
        sets.append(RandomConceptSet(set_id, tuple(members)))
    logger.info("Built %d random concept sets of %d images", n_sets, set_size)
    return sets


def whole_image_concept(image: Image, input_side: int) -> ConceptImage:
    """A complete image as a random concept member (ACE-style)"""
    square, (top, left) = center_crop_square(image.pixels)
    region = (top, left, top + square.shape[0], left + square.shape[1])
    resized = preprocess(image, input_side)
    return ConceptImage(resized.pixels, image.source_id, region, None, is_random=True)
