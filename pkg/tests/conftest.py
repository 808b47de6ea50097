"""
Pytest fixtures for all tests
"""
import json
import tempfile

import numpy as np
import pytest

from src.backend import blob_detector_spec, gray_spec, make_analytic_backend
from src.dataset import Image
from src.patches import Patch
from src.synthetic import planted_blob


@pytest.fixture
def blob_backend():
    """Bright-square detector on 72 x 72 inputs, 8 x 8 pooled grid"""
    return make_analytic_backend(blob_detector_spec())


@pytest.fixture
def small_blob_backend():
    """Bright-square detector on 18 x 18 inputs"""
    return make_analytic_backend(blob_detector_spec(input_side=18, pool=9))


@pytest.fixture
def gray_backend():
    """Identity kernel backend on 72 x 72 inputs"""
    return make_analytic_backend(gray_spec())


@pytest.fixture
def make_image():
    """Build an Image from an (H, W) gray or (H, W, 3) array"""

    def _create(pixels, source_id="img.png"):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = np.repeat(pixels[:, :, None], 3, axis=2)
        return Image(pixels, source_id)

    return _create


@pytest.fixture
def make_patch():
    """Build a random-content Patch of the given side"""

    def _create(side, seed=0, source_id="img.png", origin=(0, 0), score=0.0):
        rng = np.random.default_rng(seed)
        offset = (origin[0] * side, origin[1] * side) if origin is not None else (0, 0)
        return Patch(rng.uniform(0.0, 1.0, size=(side, side, 3)), source_id, origin, offset, score)

    return _create


@pytest.fixture
def noise_images(make_image):
    """Dim gray noise images of side 72"""
    rng = np.random.default_rng(7)
    return [make_image(rng.uniform(0.0, 0.3, size=(72, 72)), f"noise_{i:02d}.png") for i in range(12)]


@pytest.fixture
def small_planted_root(tmp_path):
    """Planted-blob dataset with 40 images"""
    return planted_blob(tmp_path / "planted", n_images=40, seed=3)


@pytest.fixture(scope="session")
def planted_root(tmp_path_factory):
    """The full planted-blob acceptance dataset (200 images, 72 x 72)"""
    return planted_blob(tmp_path_factory.mktemp("planted-blob"), n_images=200, seed=0)


@pytest.fixture
def temp_config_file():
    """Create temporary run config file"""

    def _create_config(config_data):
        temp_file = tempfile.NamedTemporaryFile(mode="w", suffix=".json", delete=False)
        if isinstance(config_data, str):
            temp_file.write(config_data)
        else:
            json.dump(config_data, temp_file)
        temp_file.close()
        return temp_file.name

    return _create_config


@pytest.fixture
def valid_config():
    """Minimal valid SPACE config"""
    return {"class_index": 1, "n_s": 8}
