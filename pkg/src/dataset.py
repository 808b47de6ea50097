"""
Labeled image dataset: decoding, class subsets and preprocessing
Images are float RGB arrays in [0, 1] with shape (H, W, 3)
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from scipy import ndimage

from src.errors import SpaceError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}

RESAMPLE_METHODS = {
    "bilinear": PILImage.Resampling.BILINEAR,
    "bicubic": PILImage.Resampling.BICUBIC,
}


class DatasetError(SpaceError):
    """Raised for unreadable or malformed datasets"""

    pass


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Image:
    """One RGB image with a stable identifier"""

    pixels: np.ndarray
    source_id: str

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise DatasetError(
                f"Image '{self.source_id}': expected (H, W, 3) pixels, got {pixels.shape}"
            )
        if pixels.shape[0] == 0 or pixels.shape[1] == 0:
            raise DatasetError(f"Image '{self.source_id}': empty pixel grid")
        if not np.all(np.isfinite(pixels)):
            raise DatasetError(f"Image '{self.source_id}': non-finite pixel values")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise DatasetError(f"Image '{self.source_id}': pixels outside [0, 1]")
        object.__setattr__(self, "pixels", _frozen(pixels))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def side(self) -> int:
        if self.height != self.width:
            raise DatasetError(f"Image '{self.source_id}' is not square")
        return self.height


@dataclass(frozen=True)
class LabeledDataset:
    """Ordered (image, class index) pairs plus the class names"""

    items: Tuple[Tuple[Image, int], ...]
    class_names: Tuple[str, ...]

    def __post_init__(self):
        for image, label in self.items:
            if not 0 <= label < len(self.class_names):
                raise DatasetError(
                    f"Image '{image.source_id}': class index {label} out of range"
                )

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Tuple[Image, int]]:
        return iter(self.items)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def decode_image(path: Union[str, Path], source_id: Optional[str] = None) -> Image:
    """Decode a PNG/JPEG file into an RGB Image"""
    path = Path(path)
    try:
        with PILImage.open(path) as handle:
            rgb = np.asarray(handle.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetError(f"Cannot decode image file {path}: {e}") from e
    return Image(rgb, source_id or path.name)


def load_dataset(root_path: Union[str, Path]) -> LabeledDataset:
    """
    Load a folder-per-class dataset

    Class indices follow the lexicographic order of the class folder names;
    items are ordered by path.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"Dataset root not found: {root}")

    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"Dataset root has no class folders (empty root): {root}")

    items: List[Tuple[Image, int]] = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(
            f
            for f in class_dir.iterdir()
            if f.is_file() and f.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            raise DatasetError(f"empty class folder '{class_dir.name}' in {root}")
        for file in files:
            source_id = file.relative_to(root).as_posix()
            items.append((decode_image(file, source_id), label))

    class_names = tuple(p.name for p in class_dirs)
    logger.info("Loaded %d images in %d classes from %s", len(items), len(class_names), root)
    return LabeledDataset(tuple(items), class_names)


def _check_class(dataset: LabeledDataset, k: int):
    if not 0 <= k < dataset.n_classes:
        raise DatasetError(
            f"Class index {k} out of range (dataset has {dataset.n_classes} classes)"
        )


def class_subset(dataset: LabeledDataset, k: int) -> List[Image]:
    """Images labeled k, in dataset order"""
    _check_class(dataset, k)
    return [image for image, label in dataset if label == k]


def other_classes(dataset: LabeledDataset, k: int) -> List[Image]:
    """Images not labeled k, in dataset order"""
    _check_class(dataset, k)
    return [image for image, label in dataset if label != k]


def resize_pixels(pixels: np.ndarray, height: int, width: int, method: str = "bilinear") -> np.ndarray:
    """
    Resample an (H, W) or (H, W, C) float array channel by channel

    "linear" interpolates between the four nearest source pixels at any
    scale. Pillow's "bilinear" and "bicubic" widen their window when
    shrinking, which smooths the result.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.shape[:2] == (height, width):
        return pixels.copy()
    if method == "linear":
        factors = (height / pixels.shape[0], width / pixels.shape[1]) + (1.0,) * (pixels.ndim - 2)
        return ndimage.zoom(pixels, factors, order=1, mode="nearest", grid_mode=True)
    resample = RESAMPLE_METHODS[method]

    def _one(channel: np.ndarray) -> np.ndarray:
        resized = PILImage.fromarray(channel.astype(np.float32), mode="F").resize(
            (width, height), resample=resample
        )
        return np.asarray(resized, dtype=np.float64)

    if pixels.ndim == 2:
        return _one(pixels)
    return np.stack([_one(pixels[..., c]) for c in range(pixels.shape[2])], axis=-1)


def center_crop_square(pixels: np.ndarray) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Largest centered square, plus its (top, left) offset"""
    height, width = pixels.shape[:2]
    side = min(height, width)
    top = (height - side) // 2
    left = (width - side) // 2
    return pixels[top : top + side, left : left + side], (top, left)


def preprocess(image: Image, side: int) -> Image:
    """Center-crop to a square and resample to side x side"""
    if side <= 0:
        raise DatasetError(f"Input side must be positive, got {side}")
    square, _ = center_crop_square(image.pixels)
    resized = resize_pixels(square, side, side, "linear")
    return Image(np.clip(resized, 0.0, 1.0), image.source_id)


def save_png(pixels: np.ndarray, path: Union[str, Path]):
    """Write float pixels in [0, 1] as an 8-bit RGB PNG"""
    data = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path, format="PNG")
