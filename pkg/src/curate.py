"""Deduplication and image/formula filters for candidate records."""

import logging
import math
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import Levenshtein

from src.latex_core import command_tokens, detect_repetition
from src.logs import StageLogger
from src.render import INK_THRESHOLD, ink_bbox
from src.schemas import (
    Category,
    CurateConfig,
    DedupConfig,
    FilterReason,
    FilterReport,
    GrayImage,
    LatexFormula,
    Token,
    Verdict,
)

logger = logging.getLogger(__name__)

# Tolerance for float products such as 0.1 * 30 landing just under an integer.
_EPSILON = 1e-9

TokenSequence = Sequence[Union[Token, str]]


def _lexemes(tokens: TokenSequence) -> List[str]:
    if tokens and isinstance(tokens[0], Token):
        return command_tokens(tokens)
    return [token for token in tokens if not str(token).isspace()]


def edit_distance(a: TokenSequence, b: TokenSequence, cap: int) -> Optional[int]:
    """Token-level Levenshtein distance with unit costs, cut off at `cap`.

    Whitespace tokens are ignored. Plain strings are compared as lexemes.

    Args:
        a: First token sequence
        b: Second token sequence
        cap: Largest distance of interest

    Returns:
        The distance, or None when it exceeds `cap`
    """
    if cap < 0:
        raise ValueError("cap must be non-negative")
    left = _lexemes(a)
    right = _lexemes(b)
    if abs(len(left) - len(right)) > cap:
        return None
    distance = Levenshtein.distance(left, right, score_cutoff=cap)
    return distance if distance <= cap else None


def duplicate_cap(length_a: int, length_b: int, threshold: float) -> int:
    """Largest edit distance at which two sequences count as duplicates."""
    return math.floor(threshold * max(length_a, length_b) + _EPSILON)


def dedup_indices(formulas: Sequence[LatexFormula], cfg: DedupConfig) -> Tuple[List[int], List[int]]:
    """Indices of kept and dropped formulas, both in input order.

    Exact duplicates (same non-whitespace lexemes) go first. The rest are
    compared greedily against earlier kept formulas whose token length falls
    in the same or an adjacent bucket. The bucket width grows to cover the
    largest length difference a duplicate can have, so no pair is missed.
    """
    lexemes = [command_tokens(formula.tokens) for formula in formulas]
    seen: Set[str] = set()
    survivors: List[int] = []
    dropped: List[int] = []
    for index, items in enumerate(lexemes):
        key = " ".join(items)
        if key in seen:
            dropped.append(index)
        else:
            seen.add(key)
            survivors.append(index)

    longest = max((len(lexemes[i]) for i in survivors), default=0)
    width = max(cfg.bucket_width, math.ceil(cfg.normalized_threshold * longest), 1)
    buckets: Dict[int, List[int]] = defaultdict(list)
    kept: List[int] = []
    for index in survivors:
        items = lexemes[index]
        bucket = len(items) // width
        duplicate = False
        for neighbor in (bucket - 1, bucket, bucket + 1):
            for other in buckets.get(neighbor, ()):
                cap = duplicate_cap(len(items), len(lexemes[other]), cfg.normalized_threshold)
                if edit_distance(items, lexemes[other], cap) is not None:
                    duplicate = True
                    break
            if duplicate:
                break
        if duplicate:
            dropped.append(index)
        else:
            buckets[bucket].append(index)
            kept.append(index)

    dropped.sort()
    return kept, dropped


def dedup(
    formulas: Sequence[LatexFormula],
    cfg: Optional[DedupConfig] = None,
) -> Tuple[List[LatexFormula], List[LatexFormula]]:
    """Split formulas into kept and dropped near-duplicates, keeping first occurrences.

    Args:
        formulas: Candidate formulas in input order
        cfg: Threshold and bucket settings

    Returns:
        (kept, dropped), each in input order
    """
    kept, dropped = dedup_indices(formulas, cfg or DedupConfig())
    StageLogger.log("dedup", f"{len(formulas)} formula(s)", f"kept {len(kept)}, dropped {len(dropped)}")
    return [formulas[i] for i in kept], [formulas[i] for i in dropped]


# ============================================================================
# Image checks
# ============================================================================

def check_aspect_ratio(
    img: GrayImage,
    min_ratio: float,
    max_ratio: float,
    threshold: int = INK_THRESHOLD,
) -> Optional[FilterReason]:
    """Check width/height of the ink bounding box lies in [min_ratio, max_ratio].

    Returns:
        None on pass, AspectRatio when out of range, RenderFail for a blank image
    """
    if not 0 < min_ratio <= max_ratio:
        raise ValueError("require 0 < min_ratio <= max_ratio")
    box = ink_bbox(img, threshold)
    if box is None:
        return FilterReason.RENDER_FAIL
    top, left, bottom, right = box
    ratio = (right - left) / (bottom - top)
    if min_ratio <= ratio <= max_ratio:
        return None
    return FilterReason.ASPECT_RATIO


def check_bounds_and_centering(
    img: GrayImage,
    margin: int,
    center_tol: float,
    threshold: int = INK_THRESHOLD,
) -> Set[FilterReason]:
    """Check the ink keeps `margin` pixels from every edge and sits near the center.

    Returns:
        Empty set on pass; otherwise BoundaryOverflow and/or NotCentered
        (RenderFail for a blank image)
    """
    if margin < 0 or not 0 <= center_tol <= 0.5:
        raise ValueError("require margin >= 0 and 0 <= center_tol <= 0.5")
    box = ink_bbox(img, threshold)
    if box is None:
        return {FilterReason.RENDER_FAIL}
    height, width = img.shape
    top, left, bottom, right = box
    reasons = set()
    if top < margin or left < margin or bottom > height - margin or right > width - margin:
        reasons.add(FilterReason.BOUNDARY_OVERFLOW)
    center_y = (top + bottom - 1) / 2.0
    center_x = (left + right - 1) / 2.0
    if (abs(center_y - (height - 1) / 2.0) > center_tol * height
            or abs(center_x - (width - 1) / 2.0) > center_tol * width):
        reasons.add(FilterReason.NOT_CENTERED)
    return reasons


_REASON_ORDER = list(FilterReason)


def _report(record_id: str, reasons: Set[FilterReason], category: Optional[Category], detail: str) -> FilterReport:
    ordered = sorted(reasons, key=_REASON_ORDER.index)
    return FilterReport(
        record_id=record_id,
        verdict=Verdict.DROP if ordered else Verdict.KEEP,
        reasons=ordered,
        category=category,
        detail=detail,
    )


def filter_image(
    record_id: str,
    img: Optional[GrayImage],
    cfg: CurateConfig,
    category: Optional[Category] = None,
) -> FilterReport:
    """Run the aspect, bounds and centering checks on one rendered image.

    A missing image is a RenderFail drop.
    """
    if img is None:
        return _report(record_id, {FilterReason.RENDER_FAIL}, category, "")
    reasons = check_bounds_and_centering(img, cfg.margin, cfg.center_tol)
    aspect = check_aspect_ratio(img, cfg.min_aspect, cfg.max_aspect)
    if aspect is not None:
        reasons.add(aspect)
    return _report(record_id, reasons, category, "")


def filter_candidate(
    record_id: str,
    formula: LatexFormula,
    img: Optional[GrayImage],
    cfg: CurateConfig,
    detail: str = "",
) -> FilterReport:
    """Image checks plus the Repetition check on the formula tokens."""
    report = filter_image(record_id, img, cfg, formula.category)
    reasons = set(report.reasons)
    if detect_repetition(formula.tokens, cfg.max_repeats):
        reasons.add(FilterReason.REPETITION)
    return _report(record_id, reasons, formula.category, detail)
