"""
Grid slicing, saliency-weighted patch importance and top-patch selection
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.backend import ModelBackend, map_images
from src.dataset import Image
from src.errors import SpaceError
from src.saliency import SaliencyMap, gradcam

logger = logging.getLogger(__name__)


class ExtractionError(SpaceError):
    """Raised for invalid grid or selection parameters"""

    pass


@dataclass(frozen=True)
class Patch:
    """
    Square crop of a source image

    origin is the (row, col) grid position for grid patches and None for
    random crops; offset is the pixel position of the top-left corner.
    """

    pixels: np.ndarray
    source_id: str
    origin: Optional[Tuple[int, int]]
    offset: Tuple[int, int]
    score: float = 0.0

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float64, copy=True)
        if pixels.ndim != 3 or pixels.shape[0] != pixels.shape[1] or pixels.shape[2] != 3:
            raise ExtractionError(f"Patch pixels must be (s, s, 3), got {pixels.shape}")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    @property
    def region(self) -> Tuple[int, int, int, int]:
        """(row0, col0, row1, col1) in source pixels, ends exclusive"""
        row, col = self.offset
        return (row, col, row + self.side, col + self.side)


@dataclass(frozen=True)
class PatchMask:
    """Binary mask of one grid window over the full image"""

    values: np.ndarray
    origin: Tuple[int, int]


def slice_image(image: Image, n_s: int) -> List[Tuple[Patch, PatchMask]]:
    """
    Split an image into an n_s x n_s grid, row-major

    When the side is not a multiple of n_s the image is center-cropped to
    the largest multiple first; masks keep the full image size.
    """
    if n_s < 1:
        raise ExtractionError(f"n_s must be at least 1, got {n_s}")
    side = min(image.height, image.width) // n_s
    if side == 0:
        raise ExtractionError(
            f"n_s={n_s} exceeds the side of image '{image.source_id}' ({image.height}x{image.width})"
        )
    top = (image.height - side * n_s) // 2
    left = (image.width - side * n_s) // 2

    pieces = []
    for row in range(n_s):
        for col in range(n_s):
            r0 = top + row * side
            c0 = left + col * side
            mask = np.zeros((image.height, image.width))
            mask[r0 : r0 + side, c0 : c0 + side] = 1.0
            patch = Patch(
                image.pixels[r0 : r0 + side, c0 : c0 + side],
                image.source_id,
                (row, col),
                (r0, c0),
            )
            pieces.append((patch, PatchMask(mask, (row, col))))
    return pieces


def patch_importance(saliency: SaliencyMap, mask: PatchMask) -> float:
    """Mean of the strictly positive saliency values inside the mask"""
    if saliency.shape != mask.values.shape:
        raise ExtractionError(
            f"Saliency shape {saliency.shape} does not match mask shape {mask.values.shape}"
        )
    masked = saliency.values * mask.values
    positive = np.count_nonzero(masked > 0.0)
    if positive == 0:
        return 0.0
    return float(masked.sum() / positive)


def select_count(n_p: float, n_patches: int) -> int:
    """ceil(n_p / 100 * n_patches)"""
    return math.ceil(round(n_p * n_patches / 100.0, 9))


def select_top(patches: Sequence[Patch], n_p: float) -> List[Patch]:
    """
    Top n_p percent of one image's patches by score

    Ties are broken by row-major grid origin.
    """
    if not 0.0 < n_p <= 100.0:
        raise ExtractionError(f"n_p must be in (0, 100], got {n_p}")
    ranked = sorted(patches, key=lambda p: (-p.score, p.origin or (0, 0)))
    return ranked[: select_count(n_p, len(ranked))]


def top_patches(image: Image, saliency: SaliencyMap, n_s: int, n_p: float) -> List[Patch]:
    """Score one image's grid patches against its saliency and keep the top n_p percent"""
    scored = [
        Patch(patch.pixels, patch.source_id, patch.origin, patch.offset, patch_importance(saliency, mask))
        for patch, mask in slice_image(image, n_s)
    ]
    return select_top(scored, n_p)


def extract_patches(
    images: Sequence[Image],
    k: int,
    backend: ModelBackend,
    n_s: int,
    n_p: float,
    layer_gradcam: str,
    workers: int = 1,
) -> List[Patch]:
    """Saliency-ranked top patches of every image, concatenated in image order"""
    if not images:
        raise ExtractionError(f"Class {k} has no images")
    if not 0.0 < n_p <= 100.0:
        raise ExtractionError(f"n_p must be in (0, 100], got {n_p}")

    per_image = map_images(
        backend,
        lambda image: top_patches(image, gradcam(image, k, layer_gradcam, backend), n_s, n_p),
        images,
        workers,
    )
    selected = [patch for patches in per_image for patch in patches]
    logger.info(
        "Selected %d patches from %d images (n_s=%d, n_p=%s)",
        len(selected),
        len(images),
        n_s,
        n_p,
    )
    return selected
