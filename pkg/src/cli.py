"""Command-line interface: extract, build, eval, stats, hist and stratify."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from src.config import LOG_LEVEL_ENV, Config, load_config
from src.dataset import (
    DROPS_NAME,
    EXTRACT_DROPS_NAME,
    STRATA,
    build,
    length_histogram,
    read_drops,
    read_manifest,
    render_stats_table,
    stats,
    stratify_benchmark,
    write_histogram_csv,
    write_stats,
    write_strata,
)
from src.extract import extract_corpus, load_documents
from src.logs import JsonlWriter, setup_logging
from src.metrics import evaluate_set, load_pairs, write_report
from src.render import Renderer
from src.schemas import ConfigError, SearchMode, TexforgeError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(TexforgeError):
    """Bad command-line input, such as a missing input path."""


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that exits with status 1 on usage errors."""

    def __init__(self, *args: Any, json_errors: bool = False, **kwargs: Any):
        super().__init__(*args, **kwargs)
        self.json_errors = json_errors

    def error(self, message: str) -> None:
        if self.json_errors:
            self.exit(EXIT_USAGE, json.dumps({"error": UsageError.__name__, "message": message}) + "\n")
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _require(path: str, kind: str = "file") -> Path:
    candidate = Path(path)
    exists = candidate.is_dir() if kind == "directory" else candidate.exists()
    if not exists:
        raise UsageError(f"{kind} '{path}' not found")
    return candidate


def _progress(args: argparse.Namespace) -> bool:
    return not args.quiet and sys.stderr.isatty()


def _emit(payload: Any) -> None:
    """Machine output goes to stdout."""
    print(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False))


def parse_sizes(text: str) -> Dict[str, int]:
    """Parse `--sizes`: one integer for every stratum, or `Name=N,Name=N`."""
    try:
        if "=" not in text:
            return {name: int(text) for name in STRATA}
        sizes = {}
        for item in text.split(","):
            name, value = item.split("=", 1)
            sizes[name.strip()] = int(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid sizes '{text}'") from e
    unknown = sorted(set(sizes) - set(STRATA))
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown strata {unknown}; expected {list(STRATA)}")
    return sizes


# ============================================================================
# Commands
# ============================================================================

def cmd_extract(args: argparse.Namespace, config: Config) -> int:
    corpus = _require(args.corpus, "directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    docs = load_documents(corpus)
    with JsonlWriter(out / EXTRACT_DROPS_NAME) as drop_log:
        units, extraction = extract_corpus(docs, drop_log)
    with JsonlWriter(out / "units.jsonl") as writer:
        for unit in units:
            writer.write({
                "doc_id": unit.doc_id,
                "kind": unit.kind.value,
                "char_span": list(unit.char_span),
                "latex": unit.formula.source,
                "category": unit.formula.category.value,
            })
    _emit(extraction.model_dump(mode="json"))
    return EXIT_OK


def cmd_build(args: argparse.Namespace, config: Config) -> int:
    corpus = _require(args.corpus, "directory")
    _, build_stats = build(corpus, args.out, config, progress=_progress(args))
    _emit({
        "out": str(args.out),
        "kept": build_stats.total_kept,
        "dropped": build_stats.total_dropped,
        "drop_reasons": build_stats.drop_reasons,
    })
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: Config) -> int:
    pairs = load_pairs(_require(args.pairs))
    renderer = Renderer(config.renderer, cache_dir=config.build.cache_dir)
    renderer.check_available()
    report = evaluate_set(pairs, config.metrics, renderer, workers=config.build.workers, progress=_progress(args))
    if args.out:
        write_report(report, args.out)
    if args.csv:
        report.to_csv(Path(args.csv))
    _emit(report.aggregates.model_dump(mode="json"))
    return EXIT_OK


def _load_manifest_and_drops(args: argparse.Namespace):
    manifest_path = _require(args.manifest)
    records = read_manifest(manifest_path)
    drops_path = _require(args.drops) if args.drops else manifest_path.parent / DROPS_NAME
    drops = read_drops(drops_path) if drops_path.is_file() else []
    return records, drops


def cmd_stats(args: argparse.Namespace, config: Config) -> int:
    records, drops = _load_manifest_and_drops(args)
    build_stats = stats(records, drops)
    if args.out:
        write_stats(build_stats, args.out)
    print(render_stats_table(build_stats))
    return EXIT_OK


def cmd_hist(args: argparse.Namespace, config: Config) -> int:
    records = read_manifest(_require(args.manifest))
    buckets = length_histogram(records)
    if args.out:
        write_histogram_csv(buckets, args.out)
    print("bucket,count")
    for bucket in buckets:
        print(f"{bucket.label},{bucket.count}")
    return EXIT_OK


def cmd_stratify(args: argparse.Namespace, config: Config) -> int:
    records = read_manifest(_require(args.manifest))
    subsets = stratify_benchmark(records, config.build.stratify_sizes, seed=config.build.seed)
    write_strata(subsets, args.out)
    _emit({name: len(subset) for name, subset in subsets.items()})
    return EXIT_OK


# ============================================================================
# Parser
# ============================================================================

def build_parser(json_errors: bool = False) -> argparse.ArgumentParser:
    """Create the argument parser with one subcommand per pipeline entry point.

    Args:
        json_errors: Report usage errors as JSON instead of plain text
    """
    parser = _Parser(
        prog="texforge",
        description="Formula dataset synthesis and evaluation toolkit.",
        json_errors=json_errors,
    )
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--workers", type=int, help="Parallel workers (build.workers)")
    parser.add_argument("--log-level", help=f"Logging level (default: ${LOG_LEVEL_ENV} or INFO)")
    parser.add_argument("--quiet", action="store_true", help="Only log warnings and errors; no progress bars")
    parser.add_argument("--json-errors", action="store_true", help="Print errors as JSON on stderr")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    extract = commands.add_parser("extract", json_errors=json_errors, help="Extract unit formulas from a Markdown corpus")
    extract.add_argument("corpus", help="Corpus directory")
    extract.add_argument("--out", required=True, help="Output directory for units.jsonl")
    extract.set_defaults(handler=cmd_extract)

    build_cmd = commands.add_parser("build", json_errors=json_errors, help="Run the full synthesis pipeline")
    build_cmd.add_argument("corpus", help="Corpus directory")
    build_cmd.add_argument("--out", required=True, help="Output directory")
    build_cmd.add_argument("--seed", type=int, help="Global seed (build.seed)")
    build_cmd.add_argument("--size", type=int, help="Number of candidates (build.size)")
    build_cmd.set_defaults(handler=cmd_build)

    evaluate = commands.add_parser("eval", json_errors=json_errors, help="Score predictions against references")
    evaluate.add_argument("pairs", help="JSON Lines file of {id, pred, ref}")
    evaluate.add_argument("--out", help="Report JSON path")
    evaluate.add_argument("--csv", help="Per-sample CSV path")
    evaluate.add_argument("--offset", type=int, help="Shift search radius (metrics.offset)")
    evaluate.add_argument("--dil-size", type=int, help="Prediction dilation radius (metrics.dil_size)")
    evaluate.add_argument("--normalize", action="store_true", default=None, help="De-stylize before scoring (metrics.normalize)")
    evaluate.add_argument("--search", choices=[mode.value for mode in SearchMode], help="Offset search (metrics.search)")
    evaluate.add_argument("--font", help="Font profile for both renders (metrics.font_id)")
    evaluate.add_argument("--dpi", type=int, help="Render resolution (metrics.dpi)")
    evaluate.set_defaults(handler=cmd_eval)

    stats_cmd = commands.add_parser("stats", json_errors=json_errors, help="Per-category statistics of a manifest")
    stats_cmd.add_argument("manifest", help="manifest.jsonl")
    stats_cmd.add_argument("--drops", help="drops.jsonl (default: next to the manifest)")
    stats_cmd.add_argument("--out", help="stats.json path")
    stats_cmd.set_defaults(handler=cmd_stats)

    hist = commands.add_parser("hist", json_errors=json_errors, help="Character-length histogram of a manifest")
    hist.add_argument("manifest", help="manifest.jsonl")
    hist.add_argument("--out", help="histogram.csv path")
    hist.set_defaults(handler=cmd_hist)

    stratify = commands.add_parser("stratify", json_errors=json_errors, help="Sample benchmark subsets from a manifest")
    stratify.add_argument("manifest", help="manifest.jsonl")
    stratify.add_argument("--out", required=True, help="Output directory for <stratum>.jsonl")
    stratify.add_argument("--sizes", type=parse_sizes, help="N, or Name=N,... (build.stratify_sizes)")
    stratify.add_argument("--seed", type=int, help="Sampling seed (build.seed)")
    stratify.set_defaults(handler=cmd_stratify)
    return parser


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted config keys set by command-line flags."""
    flags = {
        "workers": "build.workers",
        "seed": "build.seed",
        "size": "build.size",
        "offset": "metrics.offset",
        "dil_size": "metrics.dil_size",
        "normalize": "metrics.normalize",
        "search": "metrics.search",
        "font": "metrics.font_id",
        "dpi": "metrics.dpi",
        "sizes": "build.stratify_sizes",
    }
    return {key: getattr(args, flag) for flag, key in flags.items() if getattr(args, flag, None) is not None}


def _report_error(error: BaseException, code: int, json_errors: bool) -> int:
    if json_errors:
        print(json.dumps({"error": type(error).__name__, "message": str(error)}), file=sys.stderr)
    else:
        print(f"texforge: error: {error}", file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and return the exit code."""
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser(json_errors="--json-errors" in argv)
    args = parser.parse_args(argv)
    try:
        setup_logging(args.log_level or os.getenv(LOG_LEVEL_ENV, "INFO"), quiet=args.quiet)
    except ValueError:
        parser.error(f"invalid log level '{args.log_level}'")
    try:
        config = load_config(args.config, config_overrides(args))
        return args.handler(args, config)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        return _report_error(e, EXIT_USAGE, args.json_errors)
    except (TexforgeError, OSError) as e:
        logger.debug("Runtime failure", exc_info=True)
        return _report_error(e, EXIT_RUNTIME, args.json_errors)
