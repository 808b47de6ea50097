"""
Concept extraction for image classifiers

Usage:
    python3 space.py run --config run.json --dataset data/ --out out/
    python3 space.py run --config run.json --dataset data/ --out out/ --method ace --seed 3
    python3 space.py report --result out/
    python3 space.py synth --recipe planted-blob --out data/
    python3 space.py summary --result out_space/ out_ace/

Exit codes: 0 success, 1 invalid config or arguments, 2 runtime failure
"""
import argparse
import logging
import sys
from dataclasses import replace
from typing import List, Optional

from config import DEFAULT_OUTPUT_DIR
from src.backend import backend_from_name
from src.config_validator import ConfigValidationError, parse_config
from src.errors import SpaceError
from src.pipeline import run
from src.report import load_results, render_index, render_report, summarize_run, write_timing
from src.synthetic import RECIPES, write_recipe

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


class _ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so bad arguments map to exit code 1"""

    def error(self, message):
        raise ConfigValidationError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="space",
        description="Extract and test human-inspectable concepts from an image classifier",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s run --config examples_config/space_blob.json --dataset data/ --out out/
  %(prog)s report --result out/
  %(prog)s synth --recipe planted-blob --out data/
        """,
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Log at DEBUG level")
    commands = parser.add_subparsers(dest="command", parser_class=_ArgumentParser)

    run_parser = commands.add_parser("run", help="Run SPACE or ACE and write the report")
    run_parser.add_argument("--config", "-c", required=True, help="Run config JSON file")
    run_parser.add_argument("--dataset", "-d", help="Dataset root (overrides the config)")
    run_parser.add_argument(
        "--out",
        "-o",
        default=DEFAULT_OUTPUT_DIR,
        help=f"Output directory (default: {DEFAULT_OUTPUT_DIR})",
    )
    run_parser.add_argument("--method", type=str.upper, choices=["SPACE", "ACE"], help="Override the method")
    run_parser.add_argument("--seed", type=int, help="Override the seed")

    report_parser = commands.add_parser("report", help="Re-render index.html from results.json")
    report_parser.add_argument("--result", "-r", required=True, help="Output directory of a run")

    synth_parser = commands.add_parser("synth", help="Write a synthetic dataset")
    synth_parser.add_argument("--recipe", required=True, choices=sorted(RECIPES), help="Dataset recipe")
    synth_parser.add_argument("--out", "-o", required=True, help="Dataset root to write")
    synth_parser.add_argument("--seed", type=int, default=0, help="Generator seed (default: 0)")

    summary_parser = commands.add_parser("summary", help="Summarize one or more run directories")
    summary_parser.add_argument("--result", "-r", nargs="+", required=True, help="Output directories")
    return parser


def command_run(args) -> int:
    config = parse_config(args.config)
    if args.method:
        config = replace(config, method=args.method)
        if config.method == "SPACE" and config.n_s is None:
            raise ConfigValidationError(
                "Validation Errors:\n  ERROR: Missing 'n_s' (required for method SPACE)"
            )
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigValidationError(
                f"Validation Errors:\n  ERROR: 'seed' must be at least 0, got {args.seed}"
            )
        config = replace(config, seed=args.seed)

    print("=" * 60)
    print(f"Concept Extraction ({config.method})")
    print("=" * 60)
    print(f"Config: {args.config}")
    print(f"Dataset: {args.dataset or config.dataset}")
    print(f"Class index: {config.class_index}")
    print(f"Seed: {config.seed}")
    print("=" * 60)

    print(f"\nStep 1: Connecting to backend '{config.backend}'...")
    backend = backend_from_name(config.backend, config.input_side)

    print("\nStep 2: Extracting and testing concepts...")
    result = run(config, backend, args.dataset)

    print(f"\nStep 3: Writing report to {args.out}...")
    render_report(result, args.out)
    write_timing(result.timings, args.out)

    significant = sum(1 for c in result.concepts if c.significant)
    print("\n" + "=" * 60)
    print("COMPLETE:")
    print(f"  - Class: {result.class_name}")
    print(f"  - Concepts: {len(result.concepts)}")
    print(f"  - Significant: {significant}")
    for concept in result.concepts[:5]:
        score = "untestable" if concept.score is None else f"{concept.score:.3f}"
        marker = " *" if concept.significant else ""
        print(f"    c{concept.concept_id}: size {concept.size}, mean TCAV {score}{marker}")
    print(f"  - Total time: {sum(result.timings.values()):.2f}s")
    print("=" * 60)
    return EXIT_OK


def command_report(args) -> int:
    results = load_results(args.result)
    path = render_index(results, args.result)
    print(f"Report written to {path}")
    return EXIT_OK


def command_synth(args) -> int:
    root = write_recipe(args.recipe, args.out, seed=args.seed)
    print(f"Dataset '{args.recipe}' written to {root}")
    return EXIT_OK


def command_summary(args) -> int:
    print("=" * 60)
    print("Run Summary")
    print("=" * 60)
    for result_dir in args.result:
        summary = summarize_run(result_dir)
        top = "-" if summary["top_score"] is None else f"{summary['top_score']:.3f}"
        aligned = "-" if summary["aligned_ratio"] is None else f"{summary['aligned_ratio']:.2f}"
        print(f"\n{result_dir} ({summary['method']}, seed {summary['seed']})")
        print(f"  - Concepts: {summary['n_concepts']}")
        print(f"  - Significant: {summary['n_significant']}")
        print(f"  - Zero-score share: {summary['zero_score_share']:.2f}")
        print(f"  - Top score: {top}")
        print(f"  - Aligned ratio: {aligned}")
    print("=" * 60)
    return EXIT_OK


COMMANDS = {
    "run": command_run,
    "report": command_report,
    "synth": command_synth,
    "summary": command_summary,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigValidationError as e:
        print(e)
        return EXIT_INVALID

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.command is None:
        build_parser().print_help()
        return EXIT_INVALID

    try:
        return COMMANDS[args.command](args)
    except ConfigValidationError as e:
        print(e)
        print("\nCannot proceed due to validation errors.")
        print("Fix the errors above and try again.")
        return EXIT_INVALID
    except SpaceError as e:
        print(f"\nError: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        print(f"\nUnexpected error: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
