"""Dataset build orchestration, manifests, statistics and benchmark stratification."""

import csv
import hashlib
import json
import logging
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict
from tqdm import tqdm

from src.augment import augment_image, make_texture
from src.config import Config
from src.curate import dedup_indices, filter_candidate
from src.enhance import Enhancer, derive_seed, gen_short_formula, item_rng
from src.extract import extract_corpus, harvest_text_snippets, load_documents
from src.logs import JsonlWriter, StageLogger
from src.render import RenderCache, Renderer, save_gray
from src.schemas import (
    BuildStats,
    Category,
    CategoryStats,
    DatasetRecord,
    EnhanceError,
    FilterReason,
    FilterReport,
    GrayImage,
    HistogramBucket,
    LatexFormula,
    TexforgeError,
    TextureMode,
    Verdict,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
DROPS_NAME = "drops.jsonl"
STATS_NAME = "stats.json"
HISTOGRAM_NAME = "histogram.csv"
IMAGES_DIR = "images"
CACHE_DIR = ".render-cache"
EXTRACT_DROPS_NAME = "extract_drops.jsonl"

# Generated draws stop after this many attempts per targeted record
GENERATED_DRAW_FACTOR = 10
GENERATED_DRAW_SLACK = 100

HISTOGRAM_STEP = 50
HISTOGRAM_LIMIT = 1000
COMPLEX_MIN_CHARS = 500
STRATA = ("Symbol", "Ordinary", "TextHybrid", "Matrix", "Complex")

_REASON_ORDER = list(FilterReason)


class _Candidate(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    formula: LatexFormula
    font_id: str
    seed: int


def record_id(latex: str, font_id: str, seed: int) -> str:
    """Stable record id: a hash of latex, font and seed."""
    payload = f"{latex}\x00{font_id}\x00{seed}".encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


# ============================================================================
# Manifest IO
# ============================================================================

def write_manifest(records: Iterable[DatasetRecord], path: Union[str, Path]) -> None:
    """Write records as JSON Lines sorted by id.

    Raises:
        TexforgeError: If two records share an id
    """
    ordered = sorted(records, key=lambda record: record.id)
    for previous, current in zip(ordered, ordered[1:]):
        if previous.id == current.id:
            raise TexforgeError(f"duplicate record id '{current.id}' in manifest")
    with JsonlWriter(path) as writer:
        for record in ordered:
            writer.write(record)


def read_manifest(path: Union[str, Path]) -> List[DatasetRecord]:
    """Read a JSON Lines manifest."""
    with Path(path).open(encoding="utf-8") as f:
        return [DatasetRecord.model_validate_json(line) for line in f if line.strip()]


def read_drops(path: Union[str, Path]) -> List[FilterReport]:
    """Read the filter reports written next to a manifest."""
    with Path(path).open(encoding="utf-8") as f:
        return [FilterReport.model_validate_json(line) for line in f if line.strip()]


# ============================================================================
# Statistics
# ============================================================================

def histogram_edges() -> List[Tuple[int, Optional[int]]]:
    """Bucket edges [0,50), [50,100), ..., [950,1000), [1000,inf)."""
    edges = [(lower, lower + HISTOGRAM_STEP) for lower in range(0, HISTOGRAM_LIMIT, HISTOGRAM_STEP)]
    return edges + [(HISTOGRAM_LIMIT, None)]


def length_histogram(records: Iterable[DatasetRecord]) -> List[HistogramBucket]:
    """Character-length histogram over fixed buckets."""
    counts = Counter(min(record.char_length // HISTOGRAM_STEP, HISTOGRAM_LIMIT // HISTOGRAM_STEP) for record in records)
    return [
        HistogramBucket(lower=lower, upper=upper, count=counts.get(index, 0))
        for index, (lower, upper) in enumerate(histogram_edges())
    ]


def primary_reason(report: FilterReport) -> FilterReason:
    """The reason a drop is counted under, so each drop is counted once."""
    return min(report.reasons, key=_REASON_ORDER.index)


def stats(manifest: Sequence[DatasetRecord], drops: Optional[Sequence[FilterReport]] = None) -> BuildStats:
    """Per-category proportions, render fail rates and average lengths.

    Render fail rates need the drop reports: a category's rate is the share
    of its rendered candidates (kept, or dropped for a reason other than
    Duplicate) that dropped with RenderFail.

    Args:
        manifest: Kept records
        drops: Optional filter reports of dropped candidates

    Returns:
        BuildStats with a row for every category
    """
    drops = list(drops or [])
    total = len(manifest)
    by_category: Dict[Category, List[DatasetRecord]] = {category: [] for category in Category}
    for record in manifest:
        by_category[record.category].append(record)

    rendered = Counter(record.category for record in manifest)
    failed: Counter = Counter()
    for report in drops:
        if report.category is None or FilterReason.DUPLICATE in report.reasons:
            continue
        rendered[report.category] += 1
        if FilterReason.RENDER_FAIL in report.reasons:
            failed[report.category] += 1

    categories = {}
    for category, records in by_category.items():
        count = len(records)
        categories[category.value] = CategoryStats(
            count=count,
            proportion=100.0 * count / total if total else 0.0,
            render_fail_rate=100.0 * failed[category] / rendered[category] if rendered[category] else 0.0,
            avg_char_length=sum(r.char_length for r in records) / count if count else 0.0,
            avg_token_length=sum(r.token_length for r in records) / count if count else 0.0,
        )

    reasons = Counter(primary_reason(report).value for report in drops)
    return BuildStats(
        categories=categories,
        total_kept=total,
        total_dropped=len(drops),
        drop_reasons=dict(sorted(reasons.items())),
        length_histogram=length_histogram(manifest),
    )


def write_stats(build_stats: BuildStats, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(build_stats.model_dump(mode="json"), indent=2, sort_keys=True)
    Path(path).write_text(payload + "\n", encoding="utf-8")


def write_histogram_csv(buckets: Sequence[HistogramBucket], path: Union[str, Path]) -> None:
    """Write `bucket,count` rows."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["bucket", "count"])
        for bucket in buckets:
            writer.writerow([bucket.label, bucket.count])


def render_stats_table(build_stats: BuildStats) -> str:
    """Plain-text table: one column per category, rows for proportion, fail rate and lengths."""
    names = [category.value for category in Category]
    rows = [
        ("Proportion (%)", [build_stats.categories[n].proportion for n in names]),
        ("Rendering fail rate (%)", [build_stats.categories[n].render_fail_rate for n in names]),
        ("Average length (chars)", [build_stats.categories[n].avg_char_length for n in names]),
        ("Average length (tokens)", [build_stats.categories[n].avg_token_length for n in names]),
    ]
    label_width = max(len(label) for label, _ in rows)
    widths = [max(len(name), 8) for name in names]
    lines = [" " * label_width + "  " + "  ".join(name.rjust(w) for name, w in zip(names, widths))]
    for label, values in rows:
        cells = "  ".join(f"{value:.2f}".rjust(w) for value, w in zip(values, widths))
        lines.append(f"{label.ljust(label_width)}  {cells}")
    lines.append(f"kept {build_stats.total_kept}, dropped {build_stats.total_dropped}")
    return "\n".join(lines)


# ============================================================================
# Stratification
# ============================================================================

def stratum(record: DatasetRecord) -> str:
    """Benchmark stratum of a record; long formulas are Complex whatever their category."""
    if record.char_length >= COMPLEX_MIN_CHARS:
        return "Complex"
    if record.category == Category.SYMBOL:
        return "Symbol"
    if record.category in (Category.MATRIX, Category.TABLE):
        return "Matrix"
    if record.category == Category.TEXT_HYBRID:
        return "TextHybrid"
    return "Ordinary"


def stratify_benchmark(
    manifest: Sequence[DatasetRecord],
    sizes: Dict[str, int],
    seed: int = 0,
) -> Dict[str, List[DatasetRecord]]:
    """Sample disjoint benchmark subsets, seeded-uniform within each stratum.

    A stratum with fewer records than requested is returned whole with a warning.

    Args:
        manifest: Records to draw from
        sizes: Requested size per stratum name
        seed: Sampling seed

    Returns:
        Stratum name to records sorted by id
    """
    unknown = sorted(set(sizes) - set(STRATA))
    if unknown:
        raise ValueError(f"unknown strata: {unknown}")
    members: Dict[str, List[DatasetRecord]] = {name: [] for name in sizes}
    for record in sorted(manifest, key=lambda r: r.id):
        name = stratum(record)
        if name in members:
            members[name].append(record)

    subsets = {}
    for name, size in sizes.items():
        pool = members[name]
        if len(pool) <= size:
            if len(pool) < size:
                logger.warning(f"Stratum {name} has {len(pool)} record(s), fewer than the {size} requested")
            subsets[name] = pool
            continue
        picks = item_rng(seed, f"stratum:{name}").choice(len(pool), size=size, replace=False)
        subsets[name] = [pool[i] for i in sorted(picks)]
    StageLogger.log("stratify", f"{len(manifest)} record(s)", {name: len(s) for name, s in subsets.items()})
    return subsets


def write_strata(subsets: Dict[str, List[DatasetRecord]], out_dir: Union[str, Path]) -> None:
    """Write one `<stratum>.jsonl` file per subset."""
    for name, records in subsets.items():
        write_manifest(records, Path(out_dir) / f"{name}.jsonl")


# ============================================================================
# Build
# ============================================================================

def _candidate(
    index: int,
    units: Sequence[LatexFormula],
    enhancer: Optional[Enhancer],
    config: Config,
    renderer: Renderer,
    seed: int,
    generated: bool,
) -> _Candidate:
    record_seed = derive_seed(seed, index)
    rng = item_rng(config.enhance.seed, record_seed)
    if generated:
        formula = gen_short_formula(rng)
    else:
        unit = units[int(rng.integers(len(units)))]
        try:
            formula = enhancer.enhance(unit, units, rng)
        except EnhanceError as e:
            logger.warning(f"Enhancement of candidate {index} failed, keeping the unit: {e}")
            formula = unit

    fonts = list(config.renderer.fonts)
    if config.build.font_assignment == "round_robin":
        font_id = fonts[index % len(fonts)]
    else:
        font_id = fonts[int(rng.integers(len(fonts)))]
    font_id = renderer.route_font(formula.source, font_id)
    return _Candidate(
        id=record_id(formula.source, font_id, record_seed),
        formula=formula,
        font_id=font_id,
        seed=record_seed,
    )


def _check_unique(candidates: Sequence[_Candidate], ids: set) -> None:
    for candidate in candidates:
        if candidate.id in ids:
            raise TexforgeError(f"record id collision for candidate '{candidate.id}'")
        ids.add(candidate.id)


def _render_and_filter(
    candidates: Sequence[_Candidate],
    config: Config,
    renderer: Renderer,
    progress: bool,
) -> Tuple[List[Tuple[_Candidate, GrayImage]], List[FilterReport]]:
    specs = [renderer.spec(c.formula.source, c.font_id) for c in candidates]
    outcomes, _ = renderer.batch_render(specs, workers=config.build.workers, progress=progress)
    accepted: List[Tuple[_Candidate, GrayImage]] = []
    drops: List[FilterReport] = []
    for candidate, outcome in zip(candidates, outcomes):
        detail = outcome.failure.kind.value if outcome.failure is not None else ""
        report = filter_candidate(candidate.id, candidate.formula, outcome.image, config.curate, detail)
        if report.verdict == Verdict.DROP:
            drops.append(report)
        else:
            accepted.append((candidate, outcome.image))
    return accepted, drops


def generated_target(kept_corpus: int, fraction: float) -> int:
    """Generated records to add so they make up `fraction` of all kept records.

    Raises:
        ValueError: If `fraction` is not below 1
    """
    if fraction >= 1.0:
        raise ValueError("fraction must be below 1 when corpus records are kept")
    if fraction <= 0.0 or kept_corpus == 0:
        return 0
    return round(fraction * kept_corpus / (1.0 - fraction))


def _draw_generated(
    start: int,
    target: int,
    config: Config,
    renderer: Renderer,
    seed: int,
    ids: set,
    progress: bool,
) -> Tuple[List[Tuple[_Candidate, GrayImage]], List[FilterReport], int]:
    """Draw generated candidates until `target` of them pass the filters.

    Each round draws only as many as are still missing, so the kept count
    never overshoots and the result does not depend on the worker count.

    Returns:
        Accepted candidates, drop reports, and the number drawn
    """
    accepted: List[Tuple[_Candidate, GrayImage]] = []
    drops: List[FilterReport] = []
    limit = start + GENERATED_DRAW_FACTOR * target + GENERATED_DRAW_SLACK
    index = start
    while len(accepted) < target and index < limit:
        count = min(target - len(accepted), limit - index)
        batch = [_candidate(i, [], None, config, renderer, seed, generated=True) for i in range(index, index + count)]
        index += count
        _check_unique(batch, ids)
        batch_accepted, batch_drops = _render_and_filter(batch, config, renderer, progress)
        accepted.extend(batch_accepted)
        drops.extend(batch_drops)
    if len(accepted) < target:
        logger.warning(f"Kept {len(accepted)} generated formula(s) of the {target} targeted after {index - start} draws")
    return accepted, drops, index - start


def _finish_record(
    candidate: _Candidate,
    image: GrayImage,
    config: Config,
    images_dir: Path,
) -> DatasetRecord:
    rng = item_rng(config.augment.seed, candidate.seed)
    augmented, applied = augment_image(image, config.augment, rng=rng)
    relative = f"{IMAGES_DIR}/{candidate.id}.png"
    save_gray(augmented, images_dir / f"{candidate.id}.png")
    formula = candidate.formula
    return DatasetRecord(
        id=candidate.id,
        latex=formula.source,
        category=formula.category,
        char_length=formula.char_length,
        token_length=formula.token_length,
        image_path=relative,
        font_id=candidate.font_id,
        seed=candidate.seed,
        provenance=formula.provenance,
        augment_applied=applied,
    )


def build(
    corpus_dir: Optional[Union[str, Path]],
    out_dir: Union[str, Path],
    config: Config,
    seed: Optional[int] = None,
    size: Optional[int] = None,
    renderer: Optional[Renderer] = None,
    progress: bool = False,
) -> Tuple[List[DatasetRecord], BuildStats]:
    """Run extract, enhance, dedup, render, filter and augment, then persist.

    Writes `manifest.jsonl`, `drops.jsonl`, `extract_drops.jsonl`,
    `stats.json`, `histogram.csv` and `images/<id>.png` under `out_dir`.

    `size` corpus candidates are drawn from the extracted units. Once they are
    deduplicated and filtered, generated short formulas are drawn until they
    make up `enhance.short_formula_fraction` of the kept records. Generated
    formulas skip dedup. With an empty corpus (or a fraction of 1) every
    candidate is generated and drawing stops at `size` kept records.

    Args:
        corpus_dir: Markdown corpus; None for an empty corpus
        out_dir: Output directory
        config: Full configuration
        seed: Global seed; defaults to `build.seed`
        size: Number of corpus candidates; defaults to `build.size`, then the unit count
        renderer: Renderer override; built from `config.renderer` when omitted
        progress: Show progress bars on stderr

    Returns:
        Kept records sorted by id, and their statistics

    Raises:
        RendererUnavailable: If the renderer cannot run (nothing is written)
        TextureError: If the texture directory holds no image (nothing is written)
    """
    settings = config.build
    seed = settings.seed if seed is None else seed
    out = Path(out_dir)
    fraction = config.enhance.short_formula_fraction

    renderer = renderer or Renderer(config.renderer)
    renderer.check_available()
    if config.augment.p_texture > 0 and config.augment.texture.mode == TextureMode.DIRECTORY:
        make_texture((1, 1), config.augment.texture)
    if renderer.cache is None:
        renderer.cache = RenderCache(settings.cache_dir or out / CACHE_DIR)

    docs = load_documents(corpus_dir) if corpus_dir is not None else []
    with JsonlWriter(out / EXTRACT_DROPS_NAME) as drop_log:
        extracted, _ = extract_corpus(docs, drop_log)
    low, high = config.enhance.snippet_words
    snippets = [snippet for doc in docs for snippet in harvest_text_snippets(doc, low, high)]
    units = [unit.formula for unit in extracted]
    enhancer = Enhancer(config.enhance, snippets)

    if size is None:
        size = settings.size if settings.size is not None else len(units)
    generated_only = not units or fraction >= 1.0
    corpus_size = 0 if generated_only else size
    corpus = [_candidate(i, units, enhancer, config, renderer, seed, generated=False) for i in range(corpus_size)]
    ids: set = set()
    _check_unique(corpus, ids)
    StageLogger.log("enhance", f"{len(units)} unit(s)", f"{len(corpus)} corpus candidate(s)")

    drops: List[FilterReport] = []
    _, duplicate_positions = dedup_indices([c.formula for c in corpus], config.curate.dedup)
    duplicates = set(duplicate_positions)
    for index in sorted(duplicates):
        candidate = corpus[index]
        drops.append(FilterReport(
            record_id=candidate.id,
            verdict=Verdict.DROP,
            reasons=[FilterReason.DUPLICATE],
            category=candidate.formula.category,
        ))
    survivors = [c for i, c in enumerate(corpus) if i not in duplicates]
    StageLogger.log("dedup", f"{len(corpus)} eligible", f"dropped {len(duplicates)}")

    accepted, filtered = _render_and_filter(survivors, config, renderer, progress)
    drops.extend(filtered)

    target = size if generated_only else generated_target(len(accepted), fraction)
    generated, generated_drops, drawn = _draw_generated(corpus_size, target, config, renderer, seed, ids, progress)
    accepted.extend(generated)
    drops.extend(generated_drops)
    StageLogger.log("short formulas", f"target {target}", f"kept {len(generated)} of {drawn} drawn")

    images_dir = out / IMAGES_DIR
    images_dir.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=settings.workers) as pool:
        records = list(tqdm(
            pool.map(lambda item: _finish_record(item[0], item[1], config, images_dir), accepted),
            total=len(accepted),
            desc="augment",
            file=sys.stderr,
            disable=not progress,
        ))

    if len(records) + len(drops) != corpus_size + drawn:
        raise TexforgeError("record accounting mismatch between candidates, kept and dropped")

    records.sort(key=lambda record: record.id)
    drops.sort(key=lambda report: report.record_id)
    write_manifest(records, out / MANIFEST_NAME)
    with JsonlWriter(out / DROPS_NAME) as writer:
        for report in drops:
            writer.write(report)
    build_stats = stats(records, drops)
    write_stats(build_stats, out / STATS_NAME)
    write_histogram_csv(build_stats.length_histogram, out / HISTOGRAM_NAME)
    StageLogger.log("build", f"{corpus_size + drawn} candidate(s)", f"kept {len(records)}, dropped {len(drops)}")
    return records, build_stats
