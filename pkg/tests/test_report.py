import json

import numpy as np
import pytest

from src.backend import POOL_LAYER, ActivationVector
from src.clustering import Concept
from src.composition import ConceptImage
from src.config_validator import RunConfig
from src.pipeline import RunResult
from src.report import (
    ALIGNMENT_FILE,
    INDEX_FILE,
    RESULTS_FILE,
    ReportError,
    alignment_tally,
    load_alignment,
    load_results,
    render_report,
    result_to_dict,
    summarize_run,
    write_timing,
)
from src.tcav import TCAVResult


def _concept(concept_id, size, mean_score=None, p_value=None, significant=False, testable=True):
    rng = np.random.default_rng(concept_id)
    examples = tuple(
        ConceptImage(rng.uniform(size=(8, 8, 3)), f"positive/img_{i:03d}.png", (i, 0, i + 2, 2), (0, i))
        for i in range(size)
    )
    activations = tuple(ActivationVector(np.zeros(4), POOL_LAYER) for _ in range(size))
    result = None
    if mean_score is not None or not testable:
        result = TCAVResult(
            concept_id,
            tuple([mean_score] * 4) if testable else (),
            (0.5, 0.25, 0.75, 0.5) if testable else (),
            mean_score,
            p_value,
            significant,
            testable,
        )
    return Concept(concept_id, examples, activations, result)


@pytest.fixture
def run_result():
    """Three concepts: significant, not significant and untestable"""
    concepts = (
        _concept(0, 5, 1.0 / 3.0, 0.0012345678901234, True),
        _concept(1, 4, 0.5, 0.61),
        _concept(2, 2, testable=False),
    )
    config = RunConfig(class_index=1, n_s=8, seed=3, max_examples_per_concept=4)
    return RunResult(config, concepts, "positive", {"load": 0.5})


class TestRenderReport:
    """
    Tests for writing run artifacts
    """

    def test_writes_folders_index_and_results(self, run_result, tmp_path):
        """Test one gallery folder per concept plus the index and results files"""
        out = render_report(run_result, tmp_path / "out")

        folders = sorted(p.name for p in out.iterdir() if p.is_dir())
        assert folders == ["concept_000", "concept_001", "concept_002"]
        assert (out / INDEX_FILE).exists()
        assert (out / RESULTS_FILE).exists()
        # examples are capped per concept
        assert len(list((out / "concept_000").glob("*.png"))) == 4
        assert len(list((out / "concept_002").glob("*.png"))) == 2

    def test_results_are_byte_identical(self, run_result, tmp_path):
        """Test rendering twice gives the same results.json and index.html"""
        first = render_report(run_result, tmp_path / "a")
        second = render_report(run_result, tmp_path / "b")

        assert (first / RESULTS_FILE).read_bytes() == (second / RESULTS_FILE).read_bytes()
        assert (first / INDEX_FILE).read_bytes() == (second / INDEX_FILE).read_bytes()

    def test_scores_round_trip_exactly(self, run_result, tmp_path):
        """Test floats survive the JSON file unchanged"""
        out = render_report(run_result, tmp_path)

        data = load_results(out)

        assert data["concepts"][0]["mean_tcav"] == 1.0 / 3.0
        assert data["concepts"][0]["p_value"] == 0.0012345678901234
        assert data["concepts"][1]["random_baseline_scores"] == [0.5, 0.25, 0.75, 0.5]
        assert data["method"] == "SPACE"
        assert data["seed"] == 3
        assert data["class_name"] == "positive"
        assert "load" not in json.dumps(data)

    def test_example_sources(self, run_result):
        """Test each example path is paired with its source region"""
        data = result_to_dict(run_result)

        concept = data["concepts"][0]
        assert concept["examples"][1] == "concept_000/example_001.png"
        assert concept["example_sources"][1] == {"source_id": "positive/img_001.png", "region": [1, 0, 3, 2]}
        assert len(concept["example_sources"]) == 4

    def test_untestable_badge(self, run_result, tmp_path):
        """Test untestable concepts show a badge instead of numbers"""
        out = render_report(run_result, tmp_path)

        html = (out / INDEX_FILE).read_text()
        data = load_results(out)

        assert html.count("insufficient samples") == 1
        assert data["concepts"][2]["testable"] is False
        assert data["concepts"][2]["mean_tcav"] is None
        assert 'data-concept="2"' in html

    def test_index_lists_scores(self, run_result, tmp_path):
        """Test the table shows each score and p-value"""
        html = (render_report(run_result, tmp_path) / INDEX_FILE).read_text()

        assert "0.333" in html
        assert "0.001235" in html
        assert "1 significant" in html
        assert 'src="concept_001/example_003.png"' in html

    def test_alignment_is_kept_and_tallied(self, run_result, tmp_path):
        """Test saved labels survive a re-render and appear in the tally"""
        (tmp_path / ALIGNMENT_FILE).write_text(json.dumps({"0": True, "1": False}))

        render_report(run_result, tmp_path)

        html = (tmp_path / INDEX_FILE).read_text()
        assert load_alignment(tmp_path) == {0: True, 1: False}
        assert "Aligned: 1 of 2 labelled concepts." in html
        assert 'data-concept="0" checked' in html

    def test_stale_concept_folders_removed(self, run_result, tmp_path):
        """Test folders of an earlier, larger run are cleared"""
        (tmp_path / "concept_007").mkdir()

        render_report(run_result, tmp_path)

        assert not (tmp_path / "concept_007").exists()

    def test_write_failure(self, run_result, tmp_path, mocker):
        """Test a failing image write surfaces as ReportError"""
        mocker.patch("src.report.save_png", side_effect=OSError("disk full"))

        with pytest.raises(ReportError, match="disk full"):
            render_report(run_result, tmp_path)

    def test_timing_file(self, tmp_path):
        """Test stage timings are rounded to microseconds"""
        path = write_timing({"load": 0.12345678, "test": 2.0}, tmp_path)

        assert json.loads(path.read_text()) == {"load": 0.123457, "test": 2.0}


class TestReadArtifacts:
    """
    Tests for reading results and alignment files back
    """

    def test_missing_results(self, tmp_path):
        """Test a directory without results.json is an error"""
        with pytest.raises(ReportError, match="No results.json"):
            load_results(tmp_path)

    def test_results_must_list_concepts(self, tmp_path):
        """Test a JSON file of the wrong shape is rejected"""
        (tmp_path / RESULTS_FILE).write_text("[]")
        with pytest.raises(ReportError, match="not a results file"):
            load_results(tmp_path)

    def test_bad_alignment_key(self, tmp_path):
        """Test alignment keys must be concept ids"""
        (tmp_path / ALIGNMENT_FILE).write_text(json.dumps({"first": True}))
        with pytest.raises(ReportError, match="non-integer"):
            load_alignment(tmp_path)

    def test_no_alignment(self, tmp_path):
        """Test a missing alignment file means no labels"""
        assert load_alignment(tmp_path) == {}

    def test_tally_ignores_unknown_ids(self):
        """Test labels of concepts not in the run are skipped"""
        assert alignment_tally({0: True, 9: True}, [0, 1]) == (1, 1)
        assert alignment_tally({}, [0, 1]) is None


def test_summarize_run(run_result, tmp_path):
    """Test the run summary counts concepts, scores and alignment"""
    render_report(run_result, tmp_path)
    (tmp_path / ALIGNMENT_FILE).write_text(json.dumps({"0": True, "1": True, "2": False}))

    summary = summarize_run(tmp_path)

    assert summary == {
        "method": "SPACE",
        "seed": 3,
        "n_concepts": 3,
        "n_significant": 1,
        "zero_score_share": 0.0,
        "top_score": 0.5,
        "aligned_ratio": 2 / 3,
    }
