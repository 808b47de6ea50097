"""
Out-of-process model backend over a spool directory

The model process publishes descriptor.json and answers requests:

  requests/<id>.spct    input tensor (image H x W x 3, or activation vector)
  requests/<id>.json    {"op": ..., "layer_id": ..., "k": ..., "source": ...}
  responses/<id>.spct   output tensor
  responses/<id>.grads.spct  gradients (op "gradients" only)
  responses/<id>.json   {"ok": true} or {"ok": false, "error": "..."}

Every file is written under a temporary name and renamed into place; the
.json file is always written last and marks the request/response complete.
The client issues one request at a time, so it is not thread safe.
"""
import itertools
import json
import logging
import os
import threading
import time
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from config import SPOOL_POLL_INTERVAL, SPOOL_TIMEOUT
from src.backend import (
    ActivationVector,
    BackendDescriptor,
    BackendError,
    FeatureMapBundle,
    ModelBackend,
)
from src.dataset import Image
from src.errors import SpaceError
from src.tensor_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)

DESCRIPTOR_FILE = "descriptor.json"
REQUESTS_DIR = "requests"
RESPONSES_DIR = "responses"

OP_ACTIVATIONS = "activations"
OP_GRADIENTS = "gradients"
OP_LOGIT = "logit"


def _write_json(path: Path, data: dict):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, sort_keys=True))
    os.replace(tmp, path)


def _remove(*paths: Path):
    for path in paths:
        try:
            path.unlink()
        except FileNotFoundError:
            pass


def write_descriptor(spool_dir: Union[str, Path], descriptor: BackendDescriptor):
    spool = Path(spool_dir)
    (spool / REQUESTS_DIR).mkdir(parents=True, exist_ok=True)
    (spool / RESPONSES_DIR).mkdir(parents=True, exist_ok=True)
    _write_json(spool / DESCRIPTOR_FILE, descriptor.to_dict())


class SpoolBackend(ModelBackend):
    """Client side of the spool protocol"""

    thread_safe = False

    def __init__(
        self,
        spool_dir: Union[str, Path],
        timeout: float = SPOOL_TIMEOUT,
        poll_interval: float = SPOOL_POLL_INTERVAL,
    ):
        self.spool_dir = Path(spool_dir)
        self.timeout = timeout
        self.poll_interval = poll_interval
        self._counter = itertools.count()

        descriptor_path = self.spool_dir / DESCRIPTOR_FILE
        try:
            data = json.loads(descriptor_path.read_text())
        except FileNotFoundError:
            raise BackendError(f"No backend descriptor at {descriptor_path}")
        except json.JSONDecodeError as e:
            raise BackendError(f"Invalid backend descriptor {descriptor_path}: {e}")
        self._descriptor = BackendDescriptor.from_dict(data)

        (self.spool_dir / REQUESTS_DIR).mkdir(parents=True, exist_ok=True)
        (self.spool_dir / RESPONSES_DIR).mkdir(parents=True, exist_ok=True)
        logger.info("Connected to spool backend at %s", self.spool_dir)

    @property
    def descriptor(self) -> BackendDescriptor:
        return self._descriptor

    def _request(self, op: str, tensor: np.ndarray, **params) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        request_id = f"{os.getpid()}-{next(self._counter):08d}"
        requests = self.spool_dir / REQUESTS_DIR
        responses = self.spool_dir / RESPONSES_DIR

        write_tensor(requests / f"{request_id}.spct", tensor)
        _write_json(requests / f"{request_id}.json", {"op": op, **params})

        status_path = responses / f"{request_id}.json"
        output_path = responses / f"{request_id}.spct"
        grads_path = responses / f"{request_id}.grads.spct"

        deadline = time.monotonic() + self.timeout
        while not status_path.exists():
            if time.monotonic() > deadline:
                _remove(requests / f"{request_id}.spct", requests / f"{request_id}.json")
                raise BackendError(
                    f"Spool backend did not answer request {request_id} within {self.timeout}s"
                )
            time.sleep(self.poll_interval)

        try:
            status = json.loads(status_path.read_text())
            if not status.get("ok", False):
                raise BackendError(f"Spool backend error: {status.get('error', 'unknown')}")
            output = read_tensor(output_path)
            grads = read_tensor(grads_path) if op == OP_GRADIENTS else None
        finally:
            _remove(status_path, output_path, grads_path)
        return output, grads

    def activations(self, image: Image, layer_id: str) -> ActivationVector:
        self._check_image(image)
        self.descriptor.layer(layer_id)
        output, _ = self._request(OP_ACTIVATIONS, image.pixels, layer_id=layer_id, source=image.source_id)
        return ActivationVector(output.reshape(-1), layer_id, image.source_id)

    def feature_maps_and_gradients(self, image: Image, k: int, layer_id: str) -> FeatureMapBundle:
        self._check_image(image)
        self._check_class(k)
        self._spatial_layer(layer_id)
        maps, grads = self._request(
            OP_GRADIENTS, image.pixels, layer_id=layer_id, k=k, source=image.source_id
        )
        return FeatureMapBundle(maps, grads)

    def logit_from_activation(self, activation: ActivationVector, k: int) -> Tuple[float, np.ndarray]:
        self._check_class(k)
        info = self.descriptor.layer(activation.layer_id)
        if len(activation) != info.length:
            raise BackendError(
                f"Activation length {len(activation)} does not match layer "
                f"'{info.layer_id}' length {info.length}"
            )
        output, _ = self._request(OP_LOGIT, activation.values, layer_id=activation.layer_id, k=k)
        return float(output[0]), output[1:]


def handle_request(spool_dir: Union[str, Path], request_id: str, backend: ModelBackend):
    """Answer one pending request with the given in-process backend"""
    spool = Path(spool_dir)
    requests = spool / REQUESTS_DIR
    responses = spool / RESPONSES_DIR
    meta_path = requests / f"{request_id}.json"
    input_path = requests / f"{request_id}.spct"

    try:
        meta = json.loads(meta_path.read_text())
        tensor = read_tensor(input_path)
        op = meta.get("op")
        layer_id = meta.get("layer_id")
        if op == OP_ACTIVATIONS:
            image = Image(np.clip(tensor, 0.0, 1.0), meta.get("source", request_id))
            write_tensor(responses / f"{request_id}.spct", backend.activations(image, layer_id).values)
        elif op == OP_GRADIENTS:
            image = Image(np.clip(tensor, 0.0, 1.0), meta.get("source", request_id))
            bundle = backend.feature_maps_and_gradients(image, int(meta["k"]), layer_id)
            write_tensor(responses / f"{request_id}.spct", bundle.maps)
            write_tensor(responses / f"{request_id}.grads.spct", bundle.grads)
        elif op == OP_LOGIT:
            activation = ActivationVector(tensor.reshape(-1), layer_id)
            logit, grad = backend.logit_from_activation(activation, int(meta["k"]))
            write_tensor(responses / f"{request_id}.spct", np.concatenate([[logit], grad]))
        else:
            raise BackendError(f"Unknown op '{op}'")
        status = {"ok": True}
    except (SpaceError, KeyError, ValueError) as e:
        logger.warning("Request %s failed: %s", request_id, e)
        status = {"ok": False, "error": str(e)}
    finally:
        _remove(meta_path, input_path)
    _write_json(responses / f"{request_id}.json", status)


def serve_spool(
    spool_dir: Union[str, Path],
    backend: ModelBackend,
    stop_event: Optional[threading.Event] = None,
    poll_interval: float = SPOOL_POLL_INTERVAL,
    max_requests: Optional[int] = None,
) -> int:
    """
    Serve requests until stop_event is set or max_requests were answered

    Returns the number of requests answered.
    """
    spool = Path(spool_dir)
    write_descriptor(spool, backend.descriptor)
    requests = spool / REQUESTS_DIR
    served = 0
    while stop_event is None or not stop_event.is_set():
        pending = sorted(p.name[: -len(".json")] for p in requests.glob("*.json"))
        for request_id in pending:
            handle_request(spool, request_id, backend)
            served += 1
            if max_requests is not None and served >= max_requests:
                return served
        if not pending:
            time.sleep(poll_interval)
    return served
