"""Evaluation metrics: EPMR, EP@N, failure rate and command-level ExpRate."""

import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy import ndimage
from scipy.signal import fftconvolve
from tqdm import tqdm

from src.config import MetricsSettings
from src.curate import edit_distance
from src.latex_core import detokenize, normalize_style, tokenize
from src.logs import StageLogger
from src.render import Renderer
from src.schemas import (
    BinaryImage,
    ConfigError,
    EpmrConfig,
    EvalAggregates,
    EvalPair,
    EvalReport,
    GrayImage,
    ReferenceRenderError,
    RenderFailure,
    ScorePair,
    SearchMode,
    TexforgeError,
    Token,
)

logger = logging.getLogger(__name__)

EP_AT_LEVELS = (0, 1, 5, 10)
COARSE_STRIDE = 4
COARSE_REFINE = 3
COARSE_CANDIDATES = 3


def binarize(img: GrayImage, threshold: int = 128) -> BinaryImage:
    """Ink mask: pixels strictly darker than `threshold`."""
    return np.asarray(img) < threshold


def dilate(mask: BinaryImage, radius: int) -> BinaryImage:
    """Dilate with a (2r+1) square structuring element, clipped at the borders."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if radius == 0:
        return mask.copy()
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_dilation(mask, structure=structure)


def _paste_centered(mask: BinaryImage, height: int, width: int) -> BinaryImage:
    canvas = np.zeros((height, width), dtype=bool)
    h, w = mask.shape
    top = (height - h) // 2
    left = (width - w) // 2
    canvas[top:top + h, left:left + w] = mask
    return canvas


def _shifted_overlap(moving: np.ndarray, fixed: np.ndarray, dy: int, dx: int) -> int:
    """Count of pixels set in both `fixed` and `moving` translated by (dy, dx)."""
    height, width = fixed.shape
    moving_rows = slice(max(0, -dy), height - max(0, dy))
    moving_cols = slice(max(0, -dx), width - max(0, dx))
    fixed_rows = slice(max(0, dy), height - max(0, -dy))
    fixed_cols = slice(max(0, dx), width - max(0, -dx))
    return int(np.count_nonzero(moving[moving_rows, moving_cols] & fixed[fixed_rows, fixed_cols]))


class _ShiftScorer:
    """Overlap ratio of a shifted, dilated prediction against a reference.

    Both masks sit centered on a background with `offset` pixels of slack on
    every side, so no shift in the search window clips any ink.
    """

    def __init__(self, pred: BinaryImage, ref: BinaryImage, offset: int, dil_size: int):
        height = max(pred.shape[0], ref.shape[0]) + 2 * offset
        width = max(pred.shape[1], ref.shape[1]) + 2 * offset
        self.offset = offset
        self.pred = _paste_centered(pred, height, width)
        self.ref = _paste_centered(ref, height, width)
        self.dilated = dilate(self.pred, dil_size)
        self.pred_count = int(np.count_nonzero(self.pred))
        self.ref_count = int(np.count_nonzero(self.ref))

    def _ratio(self, inter: int, overlap: int) -> float:
        union = self.pred_count + self.ref_count - overlap
        return inter / union if union > 0 else 0.0

    def score(self, dy: int, dx: int) -> float:
        inter = _shifted_overlap(self.dilated, self.ref, dy, dx)
        overlap = _shifted_overlap(self.pred, self.ref, dy, dx)
        return self._ratio(inter, overlap)

    def exact(self) -> float:
        shifts = range(-self.offset, self.offset + 1)
        return max(self.score(dy, dx) for dy in shifts for dx in shifts)

    def fft(self) -> float:
        height, width = self.ref.shape
        ref = self.ref.astype(np.float64)
        inter = np.rint(fftconvolve(ref, self.dilated[::-1, ::-1].astype(np.float64), mode="full"))
        overlap = np.rint(fftconvolve(ref, self.pred[::-1, ::-1].astype(np.float64), mode="full"))
        rows = slice(height - 1 - self.offset, height + self.offset)
        cols = slice(width - 1 - self.offset, width + self.offset)
        inter = inter[rows, cols].astype(np.int64)
        overlap = overlap[rows, cols].astype(np.int64)
        union = self.pred_count + self.ref_count - overlap
        ratios = np.divide(inter, union, out=np.zeros(inter.shape), where=union > 0)
        return float(ratios.max())

    def coarse(self) -> float:
        grid = sorted(set(range(-self.offset, self.offset + 1, COARSE_STRIDE)) | {self.offset})
        scored = sorted(
            ((self.score(dy, dx), dy, dx) for dy in grid for dx in grid),
            key=lambda item: (-item[0], item[1], item[2]),
        )
        best = scored[0][0]
        for _, cy, cx in scored[:COARSE_CANDIDATES]:
            for dy in range(max(-self.offset, cy - COARSE_REFINE), min(self.offset, cy + COARSE_REFINE) + 1):
                for dx in range(max(-self.offset, cx - COARSE_REFINE), min(self.offset, cx + COARSE_REFINE) + 1):
                    best = max(best, self.score(dy, dx))
        return best


def epmr_masks(
    pred: BinaryImage,
    ref: BinaryImage,
    offset: int = 20,
    dil_size: int = 2,
    search: SearchMode = SearchMode.EXACT,
) -> float:
    """EPMR of two binary masks on the 0-100 scale.

    For every shift (dx, dy) in [-offset, offset]^2 the prediction is shifted,
    and the score is |dilated shifted pred AND ref| / |shifted pred OR ref|.
    The union uses the undilated prediction. The maximum over shifts wins.

    Args:
        pred: Prediction ink mask
        ref: Reference ink mask
        offset: Shift search radius in pixels
        dil_size: Dilation radius applied to the prediction
        search: Exact grid, FFT correlation, or coarse-to-fine grid

    Returns:
        Score in [0, 100]; 0 when both masks are empty
    """
    if offset < 0 or dil_size < 0:
        raise ValueError("offset and dil_size must be non-negative")
    scorer = _ShiftScorer(pred, ref, offset, dil_size)
    if search == SearchMode.FFT:
        best = scorer.fft()
    elif search == SearchMode.COARSE:
        best = scorer.coarse()
    else:
        best = scorer.exact()
    return 100.0 * best


def _prepare(latex: str, normalize: bool) -> str:
    if not normalize:
        return latex
    return detokenize(normalize_style(tokenize(latex)))


def epmr(
    pred_tex: str,
    ref_tex: str,
    cfg: EpmrConfig,
    renderer: Renderer,
    font_id: Optional[str] = None,
    dpi: Optional[int] = None,
) -> float:
    """Render both formulas with the same profile and score them.

    Returns:
        EPMR in [0, 100]; 0 when the prediction fails to render

    Raises:
        ReferenceRenderError: If the reference does not render
    """
    score, _ = _epmr_rendered(pred_tex, ref_tex, cfg, renderer, font_id, dpi)
    return score


def _epmr_rendered(
    pred_tex: str,
    ref_tex: str,
    cfg: EpmrConfig,
    renderer: Renderer,
    font_id: Optional[str],
    dpi: Optional[int],
) -> Tuple[float, Optional[RenderFailure]]:
    ref = renderer.render_cached(renderer.spec(ref_tex, font_id, dpi))
    if not ref.ok:
        raise ReferenceRenderError(f"reference failed to render ({ref.failure.kind.value}): {ref.failure.message}")
    pred = renderer.render_cached(renderer.spec(pred_tex, font_id, dpi))
    if not pred.ok:
        return 0.0, pred.failure
    score = epmr_masks(
        binarize(pred.image, cfg.binarize_threshold),
        binarize(ref.image, cfg.binarize_threshold),
        cfg.offset,
        cfg.dil_size,
        cfg.search,
    )
    return score, None


def ep_at_n(scores: Sequence[float], n: int) -> float:
    """Percentage of scores at or above 100 - n; 0 for no scores."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if not scores:
        return 0.0
    return 100.0 * sum(1 for score in scores if score >= 100 - n) / len(scores)


def exprate(
    pred: Union[str, Sequence[Token]],
    ref: Union[str, Sequence[Token]],
    max_edits: int = 0,
) -> bool:
    """Whether the command-level token sequences are within `max_edits` edits."""
    if max_edits < 0:
        raise ValueError("max_edits must be non-negative")
    pred_tokens = tokenize(pred) if isinstance(pred, str) else pred
    ref_tokens = tokenize(ref) if isinstance(ref, str) else ref
    return edit_distance(pred_tokens, ref_tokens, max_edits) is not None


def score_pair(pair: EvalPair, cfg: MetricsSettings, renderer: Renderer) -> ScorePair:
    """Score one prediction against its reference; errors are recorded, not raised."""
    pred = _prepare(pair.pred, cfg.normalize)
    ref = _prepare(pair.ref, cfg.normalize)
    distance = edit_distance(tokenize(pred), tokenize(ref), 2)
    exact = {
        "exprate_exact": distance == 0,
        "exprate_le1": distance is not None and distance <= 1,
        "exprate_le2": distance is not None,
        "edit_distance": distance,
    }
    try:
        score, failure = _epmr_rendered(pred, ref, cfg, renderer, cfg.font_id, cfg.dpi)
    except ReferenceRenderError as e:
        logger.warning(f"Pair {pair.id}: {e}")
        return ScorePair(id=pair.id, error=str(e), **exact)
    return ScorePair(
        id=pair.id,
        epmr=score,
        render_failed=failure is not None,
        failure_kind=failure.kind if failure is not None else None,
        **exact,
    )


def aggregate(scores: Iterable[ScorePair]) -> EvalAggregates:
    """Aggregate per-sample scores, leaving out samples with evaluation errors."""
    scores = list(scores)
    valid = [score for score in scores if score.error is None]
    n = len(valid)
    if n == 0:
        return EvalAggregates(n=0, n_errors=len(scores), ep_at={str(level): 0.0 for level in EP_AT_LEVELS})

    def percent(count: int) -> float:
        return 100.0 * count / n

    epmrs = [score.epmr for score in valid]
    return EvalAggregates(
        n=n,
        n_errors=len(scores) - n,
        fr=percent(sum(score.render_failed for score in valid)),
        epmr=sum(epmrs) / n,
        ep_at={str(level): ep_at_n(epmrs, level) for level in EP_AT_LEVELS},
        exprate=percent(sum(score.exprate_exact for score in valid)),
        exprate_le1=percent(sum(score.exprate_le1 for score in valid)),
        exprate_le2=percent(sum(score.exprate_le2 for score in valid)),
    )


def evaluate_set(
    pairs: Sequence[EvalPair],
    cfg: MetricsSettings,
    renderer: Renderer,
    workers: int = 1,
    progress: bool = False,
) -> EvalReport:
    """Score every pair and aggregate FR, EPMR, EP@N and ExpRate.

    Args:
        pairs: Prediction/reference pairs
        cfg: Metric settings; both sides render with `cfg.font_id` and one dpi
        renderer: Renderer shared by predictions and references
        workers: Pairs scored concurrently
        progress: Show a progress bar on stderr

    Returns:
        Per-sample scores in input order plus aggregates

    Raises:
        ConfigError: If `cfg.font_id` is not a renderer font
    """
    if workers < 1:
        raise ValueError("workers must be at least 1")
    font_id = cfg.font_id or next(iter(renderer.settings.fonts))
    if font_id not in renderer.settings.fonts:
        raise ConfigError(f"unknown font id '{font_id}'")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_sample = list(tqdm(
            pool.map(lambda pair: score_pair(pair, cfg, renderer), pairs),
            total=len(pairs),
            desc="eval",
            file=sys.stderr,
            disable=not progress,
        ))
    aggregates = aggregate(per_sample)
    StageLogger.log(
        "eval",
        f"{len(pairs)} pair(s)",
        f"FR {aggregates.fr:.2f}, EPMR {aggregates.epmr:.2f}, ExpRate {aggregates.exprate:.2f}",
    )
    config = cfg.model_dump(mode="json")
    config["font_id"] = font_id
    config["dpi"] = cfg.dpi or renderer.settings.dpi
    config["renderer_version"] = renderer.version
    return EvalReport(per_sample=per_sample, aggregates=aggregates, config=config)


def load_pairs(path: Union[str, Path]) -> List[EvalPair]:
    """Read a JSON Lines file of {id, pred, ref} objects.

    Raises:
        FileNotFoundError: If the file does not exist
        TexforgeError: On a malformed line
    """
    pairs = []
    with Path(path).open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                pairs.append(EvalPair.model_validate_json(line))
            except ValidationError as e:
                raise TexforgeError(f"{path}:{lineno}: invalid pair: {e.errors()[0]['msg']}") from e
    return pairs


def write_report(report: EvalReport, path: Union[str, Path]) -> None:
    """Write the report as indented JSON."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    payload = report.model_dump(mode="json")
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def summarize(report: EvalReport) -> List[Tuple[str, str]]:
    """Rows of (metric, value) for a plain-text summary."""
    agg = report.aggregates
    rows = [("n", str(agg.n)), ("errors", str(agg.n_errors)), ("FR", f"{agg.fr:.2f}"), ("EPMR", f"{agg.epmr:.2f}")]
    rows += [(f"EP@{level}", f"{value:.2f}") for level, value in agg.ep_at.items()]
    rows += [("ExpRate", f"{agg.exprate:.2f}"), ("ExpRate<=1", f"{agg.exprate_le1:.2f}"), ("ExpRate<=2", f"{agg.exprate_le2:.2f}")]
    return rows
