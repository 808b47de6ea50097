import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

import space
import src.tcav as tcav
from src.backend import POOL_LAYER, BackendError, blob_detector_spec, make_analytic_backend
from src.clustering import Concept, encode
from src.composition import build_random_concepts
from src.config_validator import ConfigValidationError, RunConfig, parse_config
from src.errors import StageError
from src.pipeline import run
from src.report import INDEX_FILE, RESULTS_FILE, TIMING_FILE
from src.synthetic import blob_overlap, load_ground_truth, planted_blob

CONFIG_DIR = Path(__file__).resolve().parent.parent / "examples_config"


@pytest.fixture(scope="module")
def space_blob_run(planted_root):
    """SPACE on the 200-image planted-blob dataset, timed"""
    config = RunConfig(class_index=1, n_s=8, n_p=10, n_pca=10, seed=0)
    backend = make_analytic_backend(blob_detector_spec())
    started = time.perf_counter()
    result = run(config, backend, planted_root)
    return result, time.perf_counter() - started


def _blob_share(concept, truth):
    hits = [blob_overlap(e.region, truth[e.source_id]) for e in concept.examples if e.source_id in truth]
    return sum(hits) / concept.size


class TestPlantedBlob:
    """
    End-to-end runs on the planted-blob dataset
    """

    def test_space_recovers_the_blob(self, space_blob_run, planted_root):
        """Test a significant concept scores at least 0.9 and shows the blob"""
        result, elapsed = space_blob_run
        truth = load_ground_truth(planted_root)

        recovered = [
            c
            for c in result.concepts
            if c.score is not None and c.score >= 0.9 and c.significant and _blob_share(c, truth) >= 0.8
        ]

        assert result.concepts
        assert recovered
        assert result.concepts[0].score >= 0.9
        assert elapsed < 120.0

    def test_concepts_sorted_untestable_last(self, space_blob_run):
        """Test concepts are ordered by descending score"""
        result, _ = space_blob_run

        scores = [c.score for c in result.concepts if c.score is not None]
        assert scores == sorted(scores, reverse=True)
        tail = [c.score is None for c in result.concepts]
        assert tail == sorted(tail)

    def test_every_stage_is_timed(self, space_blob_run):
        """Test each pipeline stage records its duration"""
        result, _ = space_blob_run

        stages = {"load", "saliency", "extract", "compose", "encode", "cluster", "random", "test"}
        assert set(result.timings) == stages
        assert result.class_name == "positive"

    def test_space_at_least_as_good_as_ace(self, space_blob_run, planted_root):
        """Test the top SPACE score is not below the top ACE score"""
        space_result, _ = space_blob_run
        ace_config = RunConfig(class_index=1, method="ACE", n_slic=(15,), n_k=10, n_pca=10, seed=0)

        ace_result = run(ace_config, make_analytic_backend(blob_detector_spec()), planted_root)

        ace_scores = [c.score for c in ace_result.concepts if c.score is not None]
        assert ace_result.method == "ACE"
        assert space_result.concepts[0].score >= max(ace_scores, default=0.0)


def test_random_concepts_score_half(gray_backend, noise_images):
    """Test random-vs-random concepts average 0.5 and are rarely significant"""
    means = []
    significant = 0
    for seed in range(10):
        randoms = build_random_concepts(noise_images, 8, 10, 10, seed=seed, input_side=72)
        pool = build_random_concepts(noise_images, 8, 1, 200, seed=seed + 1000, input_side=72)[0]
        concept = Concept(0, pool.members, tuple(encode(pool.members, gray_backend, POOL_LAYER)))

        result = tcav.test_concept(
            concept, randoms, noise_images[:4], gray_backend, POOL_LAYER, 1, repetitions=20, seed=seed
        )

        means.append(result.mean_score)
        significant += int(result.significant)

    assert abs(np.mean(means) - 0.5) <= 0.10
    assert significant <= 2


class TestRunErrors:
    """
    Tests for run-level failures
    """

    def test_empty_class(self, tmp_path, blob_backend):
        """Test a class folder without images aborts in the load stage"""
        planted_blob(tmp_path, n_images=6, seed=1)
        for png in (tmp_path / "positive").glob("*.png"):
            png.unlink()

        with pytest.raises(StageError, match="empty class") as exc:
            run(RunConfig(class_index=1, n_s=8), blob_backend, tmp_path)

        assert exc.value.stage == "load"

    def test_class_index_out_of_range(self, small_planted_root, blob_backend):
        """Test a class index beyond the dataset is a load failure"""
        with pytest.raises(StageError, match="out of range") as exc:
            run(RunConfig(class_index=2, n_s=8), blob_backend, small_planted_root)

        assert exc.value.stage == "load"

    def test_stage_name_on_failure(self, small_planted_root, blob_backend, mocker):
        """Test a failure mid-run is tagged with its stage and cause"""
        mocker.patch("src.pipeline.optics_cluster", side_effect=ValueError("boom"))

        with pytest.raises(StageError) as exc:
            run(RunConfig(class_index=1, n_s=8, n_pca=10), blob_backend, small_planted_root)

        assert exc.value.stage == "cluster"
        assert isinstance(exc.value.cause, ValueError)

    def test_no_dataset(self, blob_backend):
        """Test a run needs a dataset root"""
        with pytest.raises(ConfigValidationError, match="No dataset"):
            run(RunConfig(class_index=1, n_s=8), blob_backend)

    def test_input_side_mismatch(self, small_planted_root, blob_backend):
        """Test the config input side must match the backend"""
        with pytest.raises(BackendError, match="input side"):
            run(RunConfig(class_index=1, n_s=8, input_side=64), blob_backend, small_planted_root)


class TestCommandLine:
    """
    Tests for the space command
    """

    @pytest.fixture
    def run_config(self, temp_config_file, small_planted_root):
        return temp_config_file(
            {
                "class_index": 1,
                "n_s": 8,
                "n_pca": 10,
                "tcav_repetitions": 5,
                "dataset": str(small_planted_root),
            }
        )

    def test_run_is_deterministic(self, run_config, tmp_path, capsys):
        """Test two runs with the same seed write byte-identical results"""
        first, second = tmp_path / "first", tmp_path / "second"

        assert space.main(["run", "--config", run_config, "--out", str(first)]) == 0
        assert space.main(["run", "--config", run_config, "--out", str(second)]) == 0

        assert (first / RESULTS_FILE).read_bytes() == (second / RESULTS_FILE).read_bytes()
        assert (first / INDEX_FILE).exists()
        assert (first / TIMING_FILE).exists()
        assert "COMPLETE:" in capsys.readouterr().out

    def test_seed_and_method_overrides(self, run_config, tmp_path):
        """Test --seed and --method replace the config values"""
        out = tmp_path / "out"

        argv = ["run", "--config", run_config, "--out", str(out), "--seed", "4", "--method", "space"]

        assert space.main(argv) == 0

        results = json.loads((out / RESULTS_FILE).read_text())
        assert results["seed"] == 4
        assert results["method"] == "SPACE"

    def test_invalid_config_exit_code(self, temp_config_file, tmp_path, capsys):
        """Test a validation error exits with 1"""
        config = temp_config_file({"class_index": 1, "n_s": 8, "n_p": 0})

        assert space.main(["run", "--config", config, "--dataset", str(tmp_path)]) == 1
        assert "Cannot proceed due to validation errors." in capsys.readouterr().out

    def test_bad_arguments_exit_code(self):
        """Test argument errors exit with 1"""
        assert space.main(["run", "--method", "LIME", "--config", "x.json"]) == 1
        assert space.main([]) == 1

    def test_runtime_failure_exit_code(self, run_config, tmp_path, capsys):
        """Test a missing dataset exits with 2"""
        code = space.main(["run", "--config", run_config, "--dataset", str(tmp_path / "missing")])

        assert code == 2
        assert "stage 'load' failed" in capsys.readouterr().out

    def test_report_rerenders_index(self, run_config, tmp_path):
        """Test report rebuilds index.html from results.json"""
        out = tmp_path / "out"
        space.main(["run", "--config", run_config, "--out", str(out)])
        os.remove(out / INDEX_FILE)

        assert space.main(["report", "--result", str(out)]) == 0
        assert (out / INDEX_FILE).exists()

    def test_report_without_results(self, tmp_path):
        """Test report on an empty directory exits with 2"""
        assert space.main(["report", "--result", str(tmp_path)]) == 2

    def test_summary(self, run_config, tmp_path, capsys):
        """Test summary prints one block per run directory"""
        out = tmp_path / "out"
        space.main(["run", "--config", run_config, "--out", str(out)])
        capsys.readouterr()

        assert space.main(["summary", "--result", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "Run Summary" in printed
        assert "(SPACE, seed 0)" in printed

    def test_synth_writes_dataset(self, tmp_path):
        """Test synth writes class folders for a recipe"""
        assert space.main(["synth", "--recipe", "two-tone", "--out", str(tmp_path)]) == 0

        assert sorted(p.name for p in tmp_path.iterdir()) == ["dark-left", "light-left"]
        assert len(list((tmp_path / "dark-left").glob("*.png"))) == 10


@pytest.mark.parametrize("name", ["space_blob.json", "ace_blob.json", "space_minimal.json"])
def test_bundled_configs_validate(name):
    """Test the example configs shipped with the project are valid"""
    config = parse_config(str(CONFIG_DIR / name))

    assert config.class_index == 1
