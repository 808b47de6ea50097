"""
Synthetic datasets with known ground truth, written as class folders of PNGs
"""
import json
import logging
from pathlib import Path
from typing import Callable, Dict, Sequence, Tuple, Union

import numpy as np

from src.dataset import DatasetError, save_png

logger = logging.getLogger(__name__)

GROUND_TRUTH_FILE = "ground_truth.json"

Box = Tuple[int, int, int, int]


def planted_blob(
    out_dir: Union[str, Path],
    n_images: int = 200,
    side: int = 72,
    blob: int = 9,
    noise: float = 0.3,
    seed: int = 0,
) -> Path:
    """
    Gray noise images; every image of class 1 ("positive") also holds one
    bright blob x blob square at a random position

    Classes are split evenly. ground_truth.json maps each positive image's
    relative path to its blob box (row0, col0, row1, col1).
    """
    if blob >= side:
        raise DatasetError(f"Blob side {blob} must be smaller than the image side {side}")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    truth: Dict[str, Box] = {}

    for name in ("negative", "positive"):
        (out / name).mkdir(parents=True, exist_ok=True)
    for i in range(n_images):
        positive = i % 2 == 1
        gray = rng.uniform(0.0, noise, size=(side, side))
        pixels = np.repeat(gray[:, :, None], 3, axis=2)
        name = "positive" if positive else "negative"
        relative = f"{name}/img_{i // 2:03d}.png"
        if positive:
            row, col = (int(v) for v in rng.integers(0, side - blob + 1, size=2))
            pixels[row : row + blob, col : col + blob] = 1.0
            truth[relative] = (row, col, row + blob, col + blob)
        save_png(pixels, out / relative)

    with open(out / GROUND_TRUTH_FILE, "w") as f:
        json.dump(truth, f, sort_keys=True, indent=2)
    logger.info("Wrote %d planted-blob images to %s", n_images, out)
    return out


def two_tone(
    out_dir: Union[str, Path],
    n_images: int = 20,
    side: int = 72,
    dark: float = 0.2,
    light: float = 0.8,
    seed: int = 0,
) -> Path:
    """Left/right halves in two flat tones with light noise; class 1 is mirrored"""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    for name in ("dark-left", "light-left"):
        (out / name).mkdir(parents=True, exist_ok=True)
    for i in range(n_images):
        mirrored = i % 2 == 1
        pixels = np.empty((side, side, 3))
        left, right = (light, dark) if mirrored else (dark, light)
        pixels[:, : side // 2] = left
        pixels[:, side // 2 :] = right
        pixels += rng.uniform(-0.02, 0.02, size=pixels.shape)
        name = "light-left" if mirrored else "dark-left"
        save_png(np.clip(pixels, 0.0, 1.0), out / f"{name}/img_{i // 2:03d}.png")
    logger.info("Wrote %d two-tone images to %s", n_images, out)
    return out


RECIPES: Dict[str, Callable[..., Path]] = {
    "planted-blob": planted_blob,
    "two-tone": two_tone,
}


def write_recipe(name: str, out_dir: Union[str, Path], seed: int = 0) -> Path:
    if name not in RECIPES:
        raise DatasetError(f"Unknown recipe '{name}'. Available: {', '.join(sorted(RECIPES))}")
    return RECIPES[name](out_dir, seed=seed)


def load_ground_truth(root: Union[str, Path]) -> Dict[str, Box]:
    path = Path(root) / GROUND_TRUTH_FILE
    try:
        with open(path, "r") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"No {GROUND_TRUTH_FILE} in {root}")
    return {key: tuple(box) for key, box in raw.items()}


def blob_overlap(region: Sequence[int], box: Sequence[int]) -> bool:
    """True when two (row0, col0, row1, col1) boxes share at least one pixel"""
    r0, c0, r1, c1 = region
    b0, d0, b1, d1 = box
    return r0 < b1 and b0 < r1 and c0 < d1 and d0 < c1
