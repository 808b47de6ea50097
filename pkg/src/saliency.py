"""
Grad-CAM saliency maps
"""
import logging
from dataclasses import dataclass

import numpy as np

from src.backend import ModelBackend
from src.dataset import Image, resize_pixels

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SaliencyMap:
    """Per-pixel relevance in [0, 1], same height and width as the image"""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape


def upsample_bilinear(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    return resize_pixels(grid, height, width, "bilinear")


def gradcam(image: Image, k: int, layer_id: str, backend: ModelBackend) -> SaliencyMap:
    """
    Channel weights are the spatial mean of the gradients; the weighted sum
    of the maps is rectified, upsampled to the image and max-normalized.
    An all-zero map stays all zero.
    """
    bundle = backend.feature_maps_and_gradients(image, k, layer_id)
    weights = bundle.grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, bundle.maps, axes=1), 0.0)
    cam = np.maximum(upsample_bilinear(cam, image.height, image.width), 0.0)

    peak = cam.max()
    if peak <= 0.0:
        logger.debug("Empty saliency for %s (class %d)", image.source_id, k)
        return SaliencyMap(np.zeros_like(cam))
    return SaliencyMap(np.clip(cam / peak, 0.0, 1.0))
