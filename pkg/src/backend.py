"""
Model backend protocol and the closed-form analytic backend

A backend exposes layer activations, spatial feature maps with the
gradient of a class logit, and the logit (with its gradient) as a
function of an activation vector. The analytic backend is a single
convolution layer followed by average pooling and a linear head, so every
gradient is exact.
"""
import logging
import math
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from config import DEFAULT_INPUT_SIDE
from src.dataset import Image
from src.errors import SpaceError

logger = logging.getLogger(__name__)

CONV_LAYER = "conv"
POOL_LAYER = "pool"


class BackendError(SpaceError):
    """Raised for bad layer ids, shape mismatches and transport failures"""

    pass


def _frozen(array, ndim: int, what: str) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    if array.ndim != ndim:
        raise BackendError(f"{what}: expected {ndim}-D array, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise BackendError(f"{what}: non-finite values")
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ActivationVector:
    values: np.ndarray
    layer_id: str
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, 1, "activation"))

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class FeatureMapBundle:
    """Feature maps and d(logit)/d(maps), both (C, H, W)"""

    maps: np.ndarray
    grads: np.ndarray

    def __post_init__(self):
        maps = _frozen(self.maps, 3, "feature maps")
        grads = _frozen(self.grads, 3, "feature map gradients")
        if maps.shape != grads.shape:
            raise BackendError(
                f"Feature maps {maps.shape} and gradients {grads.shape} differ in shape"
            )
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "grads", grads)


@dataclass(frozen=True)
class LayerInfo:
    layer_id: str
    shape: Tuple[int, ...]

    @property
    def length(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spatial(self) -> bool:
        return len(self.shape) == 3


@dataclass(frozen=True)
class BackendDescriptor:
    input_side: int
    n_classes: int
    layers: Tuple[LayerInfo, ...]

    def layer(self, layer_id: str) -> LayerInfo:
        for info in self.layers:
            if info.layer_id == layer_id:
                return info
        known = ", ".join(info.layer_id for info in self.layers)
        raise BackendError(f"Unknown layer '{layer_id}' (available: {known})")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_side": self.input_side,
            "n_classes": self.n_classes,
            "layers": [{"id": i.layer_id, "shape": list(i.shape)} for i in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BackendDescriptor":
        try:
            layers = tuple(
                LayerInfo(str(entry["id"]), tuple(int(d) for d in entry["shape"]))
                for entry in data["layers"]
            )
            return cls(int(data["input_side"]), int(data["n_classes"]), layers)
        except (KeyError, TypeError, ValueError) as e:
            raise BackendError(f"Malformed backend descriptor: {e}") from e


class ModelBackend(ABC):
    """Query interface to a trained image classifier"""

    # Backends that cannot serve concurrent calls set this to False
    thread_safe = True

    @property
    @abstractmethod
    def descriptor(self) -> BackendDescriptor:
        ...

    @abstractmethod
    def activations(self, image: Image, layer_id: str) -> ActivationVector:
        ...

    @abstractmethod
    def feature_maps_and_gradients(self, image: Image, k: int, layer_id: str) -> FeatureMapBundle:
        ...

    @abstractmethod
    def logit_from_activation(self, activation: ActivationVector, k: int) -> Tuple[float, np.ndarray]:
        ...

    def _check_image(self, image: Image):
        side = self.descriptor.input_side
        if image.pixels.shape != (side, side, 3):
            raise BackendError(
                f"Image '{image.source_id}' has shape {image.pixels.shape}, "
                f"backend expects ({side}, {side}, 3)"
            )

    def _check_class(self, k: int):
        if not 0 <= k < self.descriptor.n_classes:
            raise BackendError(
                f"Class index {k} out of range (backend has {self.descriptor.n_classes} classes)"
            )

    def _spatial_layer(self, layer_id: str) -> LayerInfo:
        info = self.descriptor.layer(layer_id)
        if not info.spatial:
            raise BackendError(f"Layer '{layer_id}' is not spatial")
        return info


@dataclass(frozen=True)
class AnalyticSpec:
    """
    Weights of the analytic classifier

    kernels: (C, 3, kh, kw) per-channel kernels, or (C, kh, kw) applied to
    the channel mean. Kernel sides must be odd ("same" zero padding).
    weights: (n_classes, C * (M // pool) ** 2) linear head on the pooled
    maps, where M = ceil(input_side / stride).
    """

    kernels: np.ndarray
    conv_bias: np.ndarray
    weights: np.ndarray
    logit_bias: np.ndarray
    pool: int
    input_side: int
    stride: int = 1

    def __post_init__(self):
        kernels = np.array(self.kernels, dtype=np.float64)
        if kernels.ndim == 3:
            kernels = np.repeat(kernels[:, None, :, :] / 3.0, 3, axis=1)
        if kernels.ndim != 4 or kernels.shape[1] != 3:
            raise BackendError(f"Kernels must be (C, 3, kh, kw) or (C, kh, kw), got {kernels.shape}")
        if kernels.shape[2] % 2 == 0 or kernels.shape[3] % 2 == 0:
            raise BackendError(f"Kernel sides must be odd, got {kernels.shape[2:]}")
        n_channels = kernels.shape[0]

        conv_bias = np.array(self.conv_bias, dtype=np.float64).reshape(-1)
        if conv_bias.shape != (n_channels,):
            raise BackendError(f"conv_bias must have {n_channels} entries")

        if self.input_side <= 0 or self.stride <= 0 or self.pool <= 0:
            raise BackendError("input_side, stride and pool must be positive")
        map_side = math.ceil(self.input_side / self.stride)
        if map_side % self.pool != 0:
            raise BackendError(
                f"Pool window {self.pool} does not divide the feature map side {map_side}"
            )
        pooled_length = n_channels * (map_side // self.pool) ** 2

        weights = np.array(self.weights, dtype=np.float64)
        if weights.ndim != 2 or weights.shape[1] != pooled_length:
            raise BackendError(
                f"weights must be (n_classes, {pooled_length}), got {weights.shape}"
            )
        logit_bias = np.array(self.logit_bias, dtype=np.float64).reshape(-1)
        if logit_bias.shape != (weights.shape[0],):
            raise BackendError(f"logit_bias must have {weights.shape[0]} entries")

        for name, value in (
            ("kernels", kernels),
            ("conv_bias", conv_bias),
            ("weights", weights),
            ("logit_bias", logit_bias),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def map_side(self) -> int:
        return math.ceil(self.input_side / self.stride)

    @property
    def pooled_side(self) -> int:
        return self.map_side // self.pool


class AnalyticBackend(ModelBackend):
    """Conv -> ReLU -> average pool -> linear head, all closed form"""

    def __init__(self, spec: AnalyticSpec):
        self.spec = spec
        conv_shape = (spec.n_channels, spec.map_side, spec.map_side)
        pool_shape = (spec.n_channels * spec.pooled_side ** 2,)
        self._descriptor = BackendDescriptor(
            input_side=spec.input_side,
            n_classes=spec.weights.shape[0],
            layers=(LayerInfo(CONV_LAYER, conv_shape), LayerInfo(POOL_LAYER, pool_shape)),
        )

    @property
    def descriptor(self) -> BackendDescriptor:
        return self._descriptor

    def _feature_maps(self, pixels: np.ndarray) -> np.ndarray:
        spec = self.spec
        maps = []
        for c in range(spec.n_channels):
            response = np.full(pixels.shape[:2], spec.conv_bias[c])
            for ch in range(3):
                response += ndimage.correlate(
                    pixels[..., ch], spec.kernels[c, ch], mode="constant", cval=0.0
                )
            maps.append(response)
        maps = np.maximum(np.stack(maps), 0.0)
        return maps[:, :: spec.stride, :: spec.stride]

    def _pool(self, maps: np.ndarray) -> np.ndarray:
        spec = self.spec
        side = spec.pooled_side
        blocks = maps.reshape(spec.n_channels, side, spec.pool, side, spec.pool)
        return blocks.mean(axis=(2, 4)).reshape(-1)

    def _expand(self, pooled_grad: np.ndarray) -> np.ndarray:
        spec = self.spec
        grid = pooled_grad.reshape(spec.n_channels, spec.pooled_side, spec.pooled_side)
        grid = np.repeat(np.repeat(grid, spec.pool, axis=1), spec.pool, axis=2)
        return grid / spec.pool ** 2

    def activations(self, image: Image, layer_id: str) -> ActivationVector:
        self._check_image(image)
        info = self.descriptor.layer(layer_id)
        maps = self._feature_maps(image.pixels)
        values = maps.reshape(-1) if info.layer_id == CONV_LAYER else self._pool(maps)
        return ActivationVector(values, layer_id, image.source_id)

    def feature_maps_and_gradients(self, image: Image, k: int, layer_id: str) -> FeatureMapBundle:
        self._check_image(image)
        self._check_class(k)
        self._spatial_layer(layer_id)
        maps = self._feature_maps(image.pixels)
        return FeatureMapBundle(maps, self._expand(self.spec.weights[k]))

    def logit_from_activation(self, activation: ActivationVector, k: int) -> Tuple[float, np.ndarray]:
        self._check_class(k)
        info = self.descriptor.layer(activation.layer_id)
        if len(activation) != info.length:
            raise BackendError(
                f"Activation length {len(activation)} does not match layer "
                f"'{info.layer_id}' length {info.length}"
            )
        weights = self.spec.weights[k]
        bias = self.spec.logit_bias[k]
        if info.layer_id == POOL_LAYER:
            return float(weights @ activation.values + bias), weights.copy()
        maps = activation.values.reshape(info.shape)
        logit = float(weights @ self._pool(maps) + bias)
        return logit, self._expand(weights).reshape(-1)


def make_analytic_backend(spec: AnalyticSpec) -> AnalyticBackend:
    return AnalyticBackend(spec)


def _two_class_head(pooled_length: int) -> np.ndarray:
    """Class 1 rewards pooled response, class 0 penalizes it"""
    return np.stack([-np.ones(pooled_length), np.ones(pooled_length)])


def blob_detector_spec(
    input_side: int = 72, box: int = 5, threshold: float = 0.9, pool: int = 9
) -> AnalyticSpec:
    """
    Bright-square detector

    The conv layer fires only where a box x box window is almost entirely
    bright (mean above threshold), so dim backgrounds give exact zeros.
    """
    kernel = np.full((1, box, box), 1.0 / box ** 2)
    pooled_length = (input_side // pool) ** 2
    return AnalyticSpec(
        kernels=kernel,
        conv_bias=[-threshold],
        weights=_two_class_head(pooled_length),
        logit_bias=[0.0, 0.0],
        pool=pool,
        input_side=input_side,
    )


def gray_spec(input_side: int = 72, pool: int = 9) -> AnalyticSpec:
    """Identity kernel on the channel mean, no threshold"""
    pooled_length = (input_side // pool) ** 2
    return AnalyticSpec(
        kernels=np.ones((1, 1, 1)),
        conv_bias=[0.0],
        weights=_two_class_head(pooled_length),
        logit_bias=[0.0, 0.0],
        pool=pool,
        input_side=input_side,
    )


ANALYTIC_PRESETS = {
    "analytic-blob": blob_detector_spec,
    "analytic-gray": gray_spec,
}


def backend_from_name(name: str, input_side: Optional[int] = None) -> ModelBackend:
    """
    Build a backend from its config name

    analytic-blob, analytic-gray: built-in analytic classifiers
    spool:<dir>: out-of-process model serving through a spool directory
    """
    if name.startswith("spool:"):
        from src.spool_backend import SpoolBackend

        return SpoolBackend(name[len("spool:") :])
    if name not in ANALYTIC_PRESETS:
        known = ", ".join(sorted(ANALYTIC_PRESETS) + ["spool:<dir>"])
        raise BackendError(f"Unknown backend '{name}' (available: {known})")
    factory = ANALYTIC_PRESETS[name]
    spec = factory(input_side=input_side or DEFAULT_INPUT_SIDE)
    logger.info("Using %s backend with input side %d", name, spec.input_side)
    return make_analytic_backend(spec)


def map_images(backend: ModelBackend, fn, items, workers: int = 1) -> list:
    """
    Apply fn to every item, in order

    Runs on a thread pool when workers > 1 and the backend allows concurrent
    calls; otherwise calls are serialized.
    """
    items = list(items)
    if workers <= 1 or not backend.thread_safe or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
