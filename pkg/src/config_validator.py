"""
Run configuration validator
Collects every problem in a config file and reports them together
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

from config import (
    DEFAULT_ALPHA,
    DEFAULT_BACKEND,
    DEFAULT_COMPACTNESS,
    DEFAULT_KMEANS_RESTARTS,
    DEFAULT_LAYER_ACTIV,
    DEFAULT_LAYER_GRADCAM,
    DEFAULT_METHOD,
    DEFAULT_MIN_CONCEPT_SIZE,
    DEFAULT_N_K,
    DEFAULT_N_P,
    DEFAULT_N_PCA,
    DEFAULT_N_RANDOM_CONCEPTS,
    DEFAULT_N_SLIC,
    DEFAULT_OPTICS_MIN_SAMPLES,
    DEFAULT_OPTICS_XI,
    DEFAULT_PAD_VALUE,
    DEFAULT_SEED,
    DEFAULT_SIGMA,
    DEFAULT_TCAV_REPETITIONS,
    DEFAULT_WORKERS,
    MAX_EXAMPLES_PER_CONCEPT,
)
from src.errors import SpaceError

logger = logging.getLogger(__name__)


class ConfigValidationError(SpaceError):
    """Custom exception for run configuration errors"""

    pass


@dataclass(frozen=True)
class RunConfig:
    class_index: int
    n_s: Optional[int] = None
    method: str = DEFAULT_METHOD
    n_p: float = DEFAULT_N_P
    n_pca: int = DEFAULT_N_PCA
    layer_gradcam: str = DEFAULT_LAYER_GRADCAM
    layer_activ: str = DEFAULT_LAYER_ACTIV
    tcav_repetitions: int = DEFAULT_TCAV_REPETITIONS
    n_random_concepts: int = DEFAULT_N_RANDOM_CONCEPTS
    seed: int = DEFAULT_SEED
    dataset: Optional[str] = None
    input_side: Optional[int] = None
    alpha: float = DEFAULT_ALPHA
    min_concept_size: int = DEFAULT_MIN_CONCEPT_SIZE
    optics_min_samples: int = DEFAULT_OPTICS_MIN_SAMPLES
    optics_xi: float = DEFAULT_OPTICS_XI
    optics_max_eps: Optional[float] = None
    random_set_size: Optional[int] = None
    n_slic: Tuple[int, ...] = field(default_factory=lambda: tuple(DEFAULT_N_SLIC))
    n_k: int = DEFAULT_N_K
    compactness: float = DEFAULT_COMPACTNESS
    sigma: float = DEFAULT_SIGMA
    pad_value: Union[float, str] = DEFAULT_PAD_VALUE
    kmeans_restarts: int = DEFAULT_KMEANS_RESTARTS
    max_examples_per_concept: int = MAX_EXAMPLES_PER_CONCEPT
    backend: str = DEFAULT_BACKEND
    workers: int = DEFAULT_WORKERS


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    """JSON-ready dict of every field"""
    data = asdict(config)
    data["n_slic"] = list(config.n_slic)
    return data


class ConfigValidator:
    """Validates a run configuration object"""

    METHODS = ["SPACE", "ACE"]

    # key -> expected JSON type
    FIELD_TYPES = {
        "method": "string",
        "class_index": "int",
        "n_s": "int",
        "n_p": "number",
        "n_pca": "int",
        "layer_gradcam": "string",
        "layer_activ": "string",
        "tcav_repetitions": "int",
        "n_random_concepts": "int",
        "seed": "int",
        "dataset": "string",
        "input_side": "int",
        "alpha": "number",
        "min_concept_size": "int",
        "optics_min_samples": "int",
        "optics_xi": "number",
        "optics_max_eps": "number",
        "random_set_size": "int",
        "n_slic": "int_list",
        "n_k": "int",
        "compactness": "number",
        "sigma": "number",
        "pad_value": "pad",
        "kmeans_restarts": "int",
        "max_examples_per_concept": "int",
        "backend": "string",
        "workers": "int",
    }

    # Keys that may be null (meaning "derive it")
    NULLABLE = {"dataset", "input_side", "optics_max_eps", "random_set_size", "n_s"}

    ACE_ONLY = {"n_slic", "n_k", "compactness", "sigma", "pad_value", "kmeans_restarts"}
    SPACE_ONLY = {"n_p", "optics_min_samples", "optics_xi", "optics_max_eps"}

    REQUIRED = ["class_index"]

    # Above this, small runs rarely have enough encoded samples
    LARGE_N_PCA = 30

    def __init__(self):
        self.errors: List[str] = []
        self.warnings: List[str] = []

    def validate_config_file(self, config_file: str) -> RunConfig:
        """Validate a config file and build the RunConfig"""
        self.errors = []
        self.warnings = []

        try:
            with open(config_file, "r") as f:
                data = json.load(f, object_pairs_hook=self._reject_duplicates)
        except FileNotFoundError:
            self._add_error(f"Config file not found: {config_file}")
            raise ConfigValidationError(self._format_errors())
        except json.JSONDecodeError as e:
            self._add_error(f"Invalid JSON: {e}")
            raise ConfigValidationError(self._format_errors())
        except ConfigValidationError:
            raise ConfigValidationError(self._format_errors())

        return self.validate(data, reset=False)

    def validate(self, data: Any, reset: bool = True) -> RunConfig:
        """Validate a parsed config object and build the RunConfig"""
        if reset:
            self.errors = []
            self.warnings = []

        if not isinstance(data, dict):
            self._add_error("Config must be a JSON object")
            raise ConfigValidationError(self._format_errors())

        for key in data:
            if key not in self.FIELD_TYPES:
                self._add_error(f"Unknown key '{key}'")

        for key in self.REQUIRED:
            if key not in data:
                self._add_error(f"Missing '{key}'")

        for key, value in data.items():
            if key in self.FIELD_TYPES:
                self._check_type(key, value)

        if not self.errors:
            self._check_ranges(data)
            self._check_method_keys(data)

        if self.errors:
            raise ConfigValidationError(self._format_errors())

        for warning in self.warnings:
            logger.warning(warning)
        return self._build(data)

    def _reject_duplicates(self, pairs):
        seen = {}
        for key, value in pairs:
            if key in seen:
                self._add_error(f"Duplicate key '{key}'")
            seen[key] = value
        if self.errors:
            raise ConfigValidationError(self._format_errors())
        return seen

    def _check_type(self, key: str, value: Any):
        expected = self.FIELD_TYPES[key]
        if value is None:
            if key not in self.NULLABLE:
                self._add_error(f"'{key}' must not be null")
            return

        is_int = isinstance(value, int) and not isinstance(value, bool)
        is_number = is_int or isinstance(value, float)
        ok = {
            "string": isinstance(value, str),
            "int": is_int,
            "number": is_number,
            "int_list": isinstance(value, list)
            and all(isinstance(v, int) and not isinstance(v, bool) for v in value),
            "pad": is_number or value == "mean",
        }[expected]
        if not ok:
            readable = {
                "string": "a string",
                "int": "an integer",
                "number": "a number",
                "int_list": "a list of integers",
                "pad": "a number in 0..255 or \"mean\"",
            }[expected]
            self._add_error(f"'{key}' must be {readable}, got {json.dumps(value)}")

    def _check_range(self, data: Dict, key: str, low=None, high=None, low_open=False, high_open=False):
        value = data.get(key)
        if value is None or isinstance(value, (str, list)):
            return
        if low is not None and (value <= low if low_open else value < low):
            bound = "greater than" if low_open else "at least"
            self._add_error(f"'{key}' must be {bound} {low}, got {value}")
        if high is not None and (value >= high if high_open else value > high):
            bound = "less than" if high_open else "at most"
            self._add_error(f"'{key}' must be {bound} {high}, got {value}")

    def _check_ranges(self, data: Dict):
        method = str(data.get("method", DEFAULT_METHOD)).upper()
        if method not in self.METHODS:
            self._add_error(f"Invalid method '{data['method']}'. Must be 'SPACE' or 'ACE'")
        if method == "SPACE" and data.get("n_s") is None:
            self._add_error("Missing 'n_s' (required for method SPACE)")

        self._check_range(data, "class_index", low=0)
        self._check_range(data, "n_s", low=2)
        self._check_range(data, "n_p", low=0, high=100, low_open=True)
        self._check_range(data, "n_pca", low=1)
        self._check_range(data, "tcav_repetitions", low=2)
        self._check_range(data, "n_random_concepts", low=2)
        self._check_range(data, "seed", low=0, high=2 ** 64, high_open=True)
        self._check_range(data, "input_side", low=1)
        self._check_range(data, "alpha", low=0, high=1, low_open=True, high_open=True)
        self._check_range(data, "min_concept_size", low=2)
        self._check_range(data, "optics_min_samples", low=2)
        self._check_range(data, "optics_xi", low=0, high=1, low_open=True, high_open=True)
        self._check_range(data, "optics_max_eps", low=0, low_open=True)
        self._check_range(data, "random_set_size", low=3)
        self._check_range(data, "n_k", low=1)
        self._check_range(data, "compactness", low=0, low_open=True)
        self._check_range(data, "sigma", low=0)
        self._check_range(data, "pad_value", low=0, high=255)
        self._check_range(data, "kmeans_restarts", low=1)
        self._check_range(data, "max_examples_per_concept", low=1)
        self._check_range(data, "workers", low=1)

        n_slic = data.get("n_slic")
        if isinstance(n_slic, list):
            if not n_slic:
                self._add_error("'n_slic' must list at least one segment count")
            elif any(v < 1 for v in n_slic):
                self._add_error(f"'n_slic' values must be positive, got {n_slic}")

        for key in ("layer_gradcam", "layer_activ", "backend"):
            if key in data and isinstance(data[key], str) and not data[key].strip():
                self._add_error(f"'{key}' must not be empty")

        if data.get("n_pca", DEFAULT_N_PCA) > self.LARGE_N_PCA:
            self._add_warning(
                f"n_pca={data['n_pca']} is above {self.LARGE_N_PCA}; "
                f"small runs may not encode enough samples"
            )

    def _check_method_keys(self, data: Dict):
        method = str(data.get("method", DEFAULT_METHOD)).upper()
        unused = self.ACE_ONLY if method == "SPACE" else self.SPACE_ONLY
        for key in sorted(unused & set(data)):
            self._add_warning(f"'{key}' has no effect with method {method}")

    def _build(self, data: Dict) -> RunConfig:
        values = dict(data)
        values["method"] = str(values.get("method", DEFAULT_METHOD)).upper()
        if "n_p" in values:
            values["n_p"] = float(values["n_p"])
        for key in ("alpha", "optics_xi", "compactness", "sigma"):
            if key in values:
                values[key] = float(values[key])
        if values.get("optics_max_eps") is not None:
            values["optics_max_eps"] = float(values["optics_max_eps"])
        if "n_slic" in values:
            values["n_slic"] = tuple(values["n_slic"])
        return RunConfig(**values)

    def _add_error(self, message: str):
        """Add validation error"""
        self.errors.append(f"ERROR: {message}")

    def _add_warning(self, message: str):
        """Add validation warning"""
        self.warnings.append(f"WARNING: {message}")

    def _format_errors(self) -> str:
        lines = []
        if self.errors:
            lines.append("Validation Errors:")
            lines.extend(f"  {e}" for e in self.errors)
        if self.warnings:
            lines.append("\nWarnings:")
            lines.extend(f"  {w}" for w in self.warnings)
        return "\n".join(lines)


def parse_config(path: str) -> RunConfig:
    """Read and validate a run config file"""
    return ConfigValidator().validate_config_file(path)
