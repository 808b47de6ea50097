"""
Run artifacts: results.json, concept galleries, index.html and alignment labels

Layout of an output directory:

    results.json            scores and example paths (deterministic bytes)
    timing.json             per-stage durations (varies between runs)
    alignment.json          manual labels, concept id -> true/false
    index.html              gallery page
    concept_000/example_000.png ...
"""
import json
import logging
import shutil
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Tuple, Union

from jinja2 import Environment, select_autoescape

from src.config_validator import config_to_dict
from src.dataset import save_png
from src.errors import SpaceError

if TYPE_CHECKING:
    from src.pipeline import RunResult

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.json"
INDEX_FILE = "index.html"
ALIGNMENT_FILE = "alignment.json"
TIMING_FILE = "timing.json"


class ReportError(SpaceError):
    """Raised when run artifacts cannot be written or read"""

    pass


INDEX_TEMPLATE = """<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>{{ method }} concepts, class {{ class_label }}</title>
<style>
body { font-family: sans-serif; margin: 2em; color: #222; }
table { border-collapse: collapse; width: 100%; }
td, th { border-bottom: 1px solid #ddd; padding: 6px; vertical-align: top; text-align: left; }
.gallery img { width: 64px; height: 64px; margin: 1px; image-rendering: pixelated; }
.significant { color: #1a7f37; font-weight: bold; }
.not-significant { color: #888; }
.badge { background: #f0ad4e; color: #fff; border-radius: 3px; padding: 1px 6px; font-size: 0.85em; }
</style>
</head>
<body>
<h1>{{ method }} concepts, class {{ class_label }}</h1>
<p>Seed {{ seed }}; {{ concepts|length }} concepts, {{ n_significant }} significant.</p>
{% if tally %}
<p id="tally">Aligned: {{ tally[0] }} of {{ tally[1] }} labelled concepts.</p>
{% endif %}
<table>
<tr><th>Concept</th><th>Size</th><th>Mean TCAV</th><th>p-value</th><th>Significant</th><th>Aligned</th><th>Examples</th></tr>
{% for concept in concepts %}
<tr>
<td>c{{ concept.id }}</td>
<td>{{ concept.size }}</td>
{% if concept.testable %}
<td>{{ "%.3f"|format(concept.mean_tcav) }}</td>
<td>{{ "%.4g"|format(concept.p_value) }}</td>
<td class="{{ 'significant' if concept.significant else 'not-significant' }}">{{ "&#10003;"|safe if concept.significant else "&#8211;"|safe }}</td>
{% else %}
<td colspan="3"><span class="badge">insufficient samples</span></td>
{% endif %}
<td><input type="checkbox" class="aligned" data-concept="{{ concept.id }}"{% if alignment.get(concept.id) %} checked{% endif %}></td>
<td class="gallery">{% for path in concept.examples %}<img src="{{ path }}" alt="c{{ concept.id }}">{% endfor %}</td>
</tr>
{% endfor %}
</table>
<p><button id="save">Save alignment</button></p>
<script>
document.getElementById("save").addEventListener("click", function () {
  var labels = {};
  document.querySelectorAll("input.aligned").forEach(function (box) {
    labels[box.dataset.concept] = box.checked;
  });
  var blob = new Blob([JSON.stringify(labels, null, 2)], {type: "application/json"});
  var link = document.createElement("a");
  link.href = URL.createObjectURL(blob);
  link.download = "{{ alignment_file }}";
  link.click();
});
</script>
</body>
</html>
"""

_environment = Environment(autoescape=select_autoescape(default=True), keep_trailing_newline=True)


def concept_dir(concept_id: int) -> str:
    return f"concept_{concept_id:03d}"


def _example_paths(concept, limit: Optional[int]) -> List[str]:
    count = concept.size if limit is None else min(concept.size, limit)
    return [f"{concept_dir(concept.concept_id)}/example_{i:03d}.png" for i in range(count)]


def result_to_dict(result: "RunResult") -> Dict[str, Any]:
    """JSON-ready view of a run result; example paths are relative to the output dir"""
    limit = result.config.max_examples_per_concept
    concepts = []
    for concept in result.concepts:
        outcome = concept.result
        paths = _example_paths(concept, limit)
        concepts.append(
            {
                "id": concept.concept_id,
                "size": concept.size,
                "mean_tcav": None if outcome is None else outcome.mean_score,
                "p_value": None if outcome is None else outcome.p_value,
                "significant": concept.significant,
                "testable": outcome is not None and outcome.testable,
                "per_run_scores": [] if outcome is None else list(outcome.per_run_scores),
                "random_baseline_scores": [] if outcome is None else list(outcome.random_baseline_scores),
                "examples": paths,
                "example_sources": [
                    {"source_id": example.source_id, "region": list(example.region)}
                    for example in concept.examples[: len(paths)]
                ],
            }
        )
    return {
        "config": config_to_dict(result.config),
        "class_index": result.config.class_index,
        "class_name": result.class_name,
        "concepts": concepts,
        "seed": result.seed,
        "method": result.method,
    }


def dumps(data: Any) -> str:
    """Stable JSON text: sorted keys, fixed indent, trailing newline"""
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def _write_text(path: Path, text: str):
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise ReportError(f"Cannot write {path}: {e}") from e


def _prepare(out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(f"Cannot create output directory {out}: {e}") from e
    return out


def write_results(result: "RunResult", out_dir: Union[str, Path]) -> Path:
    out = _prepare(out_dir)
    path = out / RESULTS_FILE
    _write_text(path, dumps(result_to_dict(result)))
    return path


def write_timing(timings: Dict[str, float], out_dir: Union[str, Path]) -> Path:
    out = _prepare(out_dir)
    path = out / TIMING_FILE
    _write_text(path, dumps({name: round(seconds, 6) for name, seconds in timings.items()}))
    return path


def load_results(out_dir: Union[str, Path]) -> Dict[str, Any]:
    path = Path(out_dir) / RESULTS_FILE
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ReportError(f"No {RESULTS_FILE} in {out_dir}")
    except (OSError, json.JSONDecodeError) as e:
        raise ReportError(f"Cannot read {path}: {e}") from e
    if not isinstance(data, dict) or "concepts" not in data:
        raise ReportError(f"{path} is not a results file")
    return data


def load_alignment(out_dir: Union[str, Path]) -> Dict[int, bool]:
    """Manual alignment labels, empty when none were saved"""
    path = Path(out_dir) / ALIGNMENT_FILE
    if not path.exists():
        return {}
    try:
        with open(path, "r") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ReportError(f"Cannot read {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ReportError(f"{path} must map concept ids to true/false")
    try:
        return {int(key): bool(value) for key, value in raw.items()}
    except ValueError as e:
        raise ReportError(f"{path} has a non-integer concept id: {e}") from e


def alignment_tally(alignment: Dict[int, bool], concept_ids) -> Optional[Tuple[int, int]]:
    """(aligned, labelled) over the given concepts, None when nothing is labelled"""
    labelled = [alignment[i] for i in concept_ids if i in alignment]
    if not labelled:
        return None
    return sum(labelled), len(labelled)


def render_index(results: Dict[str, Any], out_dir: Union[str, Path]) -> Path:
    """Write index.html for a results dict, including any saved alignment labels"""
    out = _prepare(out_dir)
    alignment = load_alignment(out)
    concepts = results["concepts"]
    class_label = results.get("class_name") or results.get("class_index", "")
    html = _environment.from_string(INDEX_TEMPLATE).render(
        method=results.get("method", ""),
        seed=results.get("seed", ""),
        class_label=class_label,
        concepts=concepts,
        n_significant=sum(1 for c in concepts if c.get("significant")),
        alignment=alignment,
        tally=alignment_tally(alignment, [c["id"] for c in concepts]),
        alignment_file=ALIGNMENT_FILE,
    )
    path = out / INDEX_FILE
    _write_text(path, html)
    return path


def render_report(result: "RunResult", out_dir: Union[str, Path]) -> Path:
    """
    Write the gallery folders, results.json and index.html

    Old concept folders are replaced; an existing alignment.json is kept.
    Returns the output directory.
    """
    out = _prepare(out_dir)
    for stale in sorted(out.glob("concept_*")):
        if stale.is_dir():
            shutil.rmtree(stale, ignore_errors=True)

    data = result_to_dict(result)
    for concept, entry in zip(result.concepts, data["concepts"]):
        folder = out / concept_dir(concept.concept_id)
        try:
            folder.mkdir(parents=True, exist_ok=True)
            for example, relative in zip(concept.examples, entry["examples"]):
                save_png(example.pixels, out / relative)
        except OSError as e:
            raise ReportError(f"Cannot write gallery {folder}: {e}") from e

    _write_text(out / RESULTS_FILE, dumps(data))
    render_index(data, out)
    logger.info("Report for %d concepts written to %s", len(result.concepts), out)
    return out


def summarize_run(out_dir: Union[str, Path]) -> Dict[str, Any]:
    """Concept counts, score summary and aligned ratio of one output directory"""
    results = load_results(out_dir)
    concepts = results["concepts"]
    scores = [c["mean_tcav"] for c in concepts if c.get("mean_tcav") is not None]
    tally = alignment_tally(load_alignment(out_dir), [c["id"] for c in concepts])
    return {
        "method": results.get("method"),
        "seed": results.get("seed"),
        "n_concepts": len(concepts),
        "n_significant": sum(1 for c in concepts if c.get("significant")),
        "zero_score_share": (sum(1 for s in scores if s == 0.0) / len(scores)) if scores else 0.0,
        "top_score": max(scores) if scores else None,
        "aligned_ratio": None if tally is None else tally[0] / tally[1],
    }
