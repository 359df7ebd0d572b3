"""Pydantic models and shared types for texforge."""

import csv
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# 8-bit grayscale raster (0 = black ink, 255 = white paper), shape (height, width).
GrayImage = npt.NDArray[np.uint8]
# Binary ink mask (True = ink), shape (height, width).
BinaryImage = npt.NDArray[np.bool_]


# ============================================================================
# Errors
# ============================================================================

class TexforgeError(Exception):
    """Base class for all texforge errors."""


class ConfigError(TexforgeError):
    """Invalid or unreadable configuration."""


class EnhanceError(TexforgeError):
    """An enhancement operation was called outside its preconditions."""


class RendererUnavailable(TexforgeError):
    """The configured renderer command cannot be found or run."""


class ReferenceRenderError(TexforgeError):
    """A reference formula failed to render during evaluation."""


class TextureError(TexforgeError):
    """A texture source cannot produce textures."""


# ============================================================================
# LaTeX
# ============================================================================

class TokenKind(str, Enum):
    """Lexical class of a LaTeX token."""

    COMMAND = "Command"
    SYMBOL = "Symbol"
    GROUP_OPEN = "GroupOpen"
    GROUP_CLOSE = "GroupClose"
    ENV_BEGIN = "EnvBegin"
    ENV_END = "EnvEnd"
    ALIGNMENT = "Alignment"
    LINE_BREAK = "LineBreak"
    TEXT = "Text"
    WHITESPACE = "Whitespace"


class Category(str, Enum):
    """Formula taxonomy used for statistics and benchmark strata."""

    SINGLE_LINE = "SingleLine"
    MULTI_LINE = "MultiLine"
    SYMBOL = "Symbol"
    TEXT_HYBRID = "TextHybrid"
    MATRIX = "Matrix"
    TABLE = "Table"


class Provenance(str, Enum):
    """Where a formula came from."""

    EXTRACTED = "Extracted"
    ENHANCED = "Enhanced"
    GENERATED = "Generated"


class SyntaxErrorKind(str, Enum):
    """Static syntax problems detected before rendering."""

    UNBALANCED_BRACES = "UnbalancedBraces"
    ENVIRONMENT_MISMATCH = "EnvironmentMismatch"
    DANGLING_COMMAND = "DanglingCommand"
    EMPTY_INPUT = "EmptyInput"


class Token(BaseModel):
    """A single lexeme of a LaTeX string."""

    model_config = ConfigDict(frozen=True)

    kind: TokenKind = Field(..., description="Lexical class")
    text: str = Field(..., description="The lexeme exactly as it appears in the source")


class LatexFormula(BaseModel):
    """A LaTeX string with its tokens, category and provenance."""

    source: str = Field(..., description="Raw LaTeX source")
    tokens: List[Token] = Field(default_factory=list, description="Token sequence of the source")
    category: Category = Field(Category.SINGLE_LINE, description="Taxonomy category")
    char_length: int = Field(0, ge=0, description="Length of the whitespace-normalized source")
    token_length: int = Field(0, ge=0, description="Number of non-whitespace tokens")
    provenance: Provenance = Field(Provenance.EXTRACTED, description="Origin of the formula")


class FormulaSyntaxError(BaseModel):
    """First static syntax problem found in a token sequence."""

    kind: SyntaxErrorKind = Field(..., description="Kind of syntax problem")
    position: int = Field(..., ge=0, description="Index of the offending token")


# ============================================================================
# Extraction
# ============================================================================

class UnitKind(str, Enum):
    """Inline or display math."""

    INLINE = "Inline"
    DISPLAY = "Display"


class MarkdownDoc(BaseModel):
    """A Markdown document produced by a PDF-to-Markdown converter."""

    path: Path = Field(..., description="Filesystem path of the document")
    text: str = Field(..., description="UTF-8 document text")
    doc_id: str = Field("", description="Stable identifier, defaults to the file name")

    @model_validator(mode="after")
    def _default_doc_id(self) -> "MarkdownDoc":
        if not self.doc_id:
            self.doc_id = self.path.name
        return self


class ExtractedUnit(BaseModel):
    """A validated unit formula found in a document."""

    formula: LatexFormula = Field(..., description="The extracted formula")
    kind: UnitKind = Field(..., description="Inline or display math")
    doc_id: str = Field(..., description="Identifier of the source document")
    char_span: Tuple[int, int] = Field(..., description="(start, end) offsets of the fenced region")


class ExtractionDrop(BaseModel):
    """A fenced region that did not become a unit."""

    doc_id: str = Field(..., description="Identifier of the source document")
    span: Tuple[int, int] = Field(..., description="(start, end) offsets of the region")
    reason: str = Field(..., description="Why the region was dropped")


# ============================================================================
# Enhancement
# ============================================================================

DEFAULT_OPERATOR_CLASSES: List[List[str]] = [
    ["+", "-", "\\pm", "\\mp"],
    ["\\times", "\\cdot", "\\ast"],
    ["<", "\\le", "\\prec"],
    [">", "\\ge", "\\succ"],
]

DEFAULT_BRACKET_PAIRS: List[Tuple[str, str]] = [
    ("(", ")"),
    ("[", "]"),
    ("\\{", "\\}"),
    ("\\langle", "\\rangle"),
    ("\\lvert", "\\rvert"),
]


class SubstitutionTable(BaseModel):
    """Classes of mutually interchangeable operators and bracket pairs."""

    model_config = ConfigDict(extra="forbid")

    operators: List[List[str]] = Field(
        default_factory=lambda: [list(c) for c in DEFAULT_OPERATOR_CLASSES],
        description="Operator classes; members of a class replace one another",
    )
    brackets: List[Tuple[str, str]] = Field(
        default_factory=lambda: list(DEFAULT_BRACKET_PAIRS),
        description="Bracket pairs; a matched pair is replaced by another pair atomically",
    )

    @model_validator(mode="after")
    def _check_classes(self) -> "SubstitutionTable":
        seen: set = set()
        for cls in self.operators:
            if len(cls) < 2:
                raise ValueError(f"operator class {cls!r} needs at least two members")
            for member in cls:
                if member in seen:
                    raise ValueError(f"lexeme {member!r} appears in more than one class")
                seen.add(member)
        for opening, closing in self.brackets:
            for member in (opening, closing):
                if member in seen:
                    raise ValueError(f"lexeme {member!r} appears in more than one class")
                seen.add(member)
        return self


class EnhanceConfig(BaseModel):
    """Probabilities and vocabularies for expression enhancement."""

    model_config = ConfigDict(extra="forbid")

    p_hcat: float = Field(0.3, ge=0.0, le=1.0, description="Probability of horizontal concatenation")
    p_vcat: float = Field(0.15, ge=0.0, le=1.0, description="Probability of vertical concatenation")
    p_subst: float = Field(0.1, ge=0.0, le=1.0, description="Per-occurrence substitution probability")
    p_text_inject: float = Field(0.1, ge=0.0, le=1.0, description="Probability of text injection")
    p_text_replace: float = Field(0.0, ge=0.0, le=1.0, description="Probability of rewriting existing text groups")
    max_units_per_formula: int = Field(3, ge=1, description="Most units joined into one formula")
    short_formula_fraction: float = Field(0.20, ge=0.0, le=1.0, description="Target share of generated short formulas")
    lexicons: Dict[str, str] = Field(
        default_factory=dict,
        description="Named lexicon files (one word per line); 'english' is built in",
    )
    snippet_words: Tuple[int, int] = Field((2, 6), description="Word-count bounds of harvested prose snippets")
    substitution: SubstitutionTable = Field(default_factory=SubstitutionTable, description="Substitution classes")
    seed: int = Field(0, description="Global enhancement seed")

    @field_validator("snippet_words")
    @classmethod
    def _ordered_words(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        low, high = value
        if low < 1 or low > high:
            raise ValueError("snippet_words must satisfy 1 <= min <= max")
        return value


# ============================================================================
# Rendering
# ============================================================================

class RenderSpec(BaseModel):
    """One rendering request."""

    model_config = ConfigDict(frozen=True)

    latex: str = Field(..., description="Formula source")
    font_id: str = Field("cm", description="Identifier of a configured font preamble")
    dpi: int = Field(200, ge=72, description="Output resolution")
    timeout_ms: int = Field(30000, ge=1000, description="Renderer timeout in milliseconds")


class RenderFailureKind(str, Enum):
    """Why a render produced no image."""

    SYNTAX_REJECT = "SyntaxReject"
    COMPILE_ERROR = "CompileError"
    TIMEOUT = "Timeout"
    EMPTY_OUTPUT = "EmptyOutput"


class RenderFailure(BaseModel):
    """A failed render."""

    kind: RenderFailureKind = Field(..., description="Failure class")
    message: str = Field("", description="Short diagnostic")


class RenderOutcome(BaseModel):
    """Either a rendered image or a failure."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: Optional[np.ndarray] = Field(None, description="Cropped grayscale image on success")
    failure: Optional[RenderFailure] = Field(None, description="Failure on error")
    from_cache: bool = Field(False, description="Whether the outcome came from the render cache")

    @model_validator(mode="after")
    def _exactly_one(self) -> "RenderOutcome":
        if (self.image is None) == (self.failure is None):
            raise ValueError("RenderOutcome needs exactly one of image or failure")
        return self

    @property
    def ok(self) -> bool:
        return self.image is not None


# ============================================================================
# Augmentation
# ============================================================================

class TextureMode(str, Enum):
    """Texture generation strategy."""

    PROCEDURAL = "Procedural"
    DIRECTORY = "Directory"


class TextureSource(BaseModel):
    """Where paper textures come from."""

    model_config = ConfigDict(extra="forbid")

    mode: TextureMode = Field(TextureMode.PROCEDURAL, description="Procedural noise or a directory of images")
    dir: Optional[Path] = Field(None, description="Texture directory for Directory mode")
    seed: int = Field(0, description="Default seed when no generator is passed")

    @model_validator(mode="after")
    def _dir_required(self) -> "TextureSource":
        if self.mode == TextureMode.DIRECTORY and self.dir is None:
            raise ValueError("Directory texture mode requires 'dir'")
        return self


AUGMENT_STEPS = ("compose", "ink", "paper")


class AugmentConfig(BaseModel):
    """Knobs for texture composition, paper and ink augmentation."""

    model_config = ConfigDict(extra="forbid")

    p_texture: float = Field(1.0, ge=0.0, le=1.0, description="Probability of composing onto a texture")
    p_lighting: float = Field(0.5, ge=0.0, le=1.0, description="Probability of a lighting field")
    p_line_noise: float = Field(0.3, ge=0.0, le=1.0, description="Probability of line noise")
    p_shadow: float = Field(0.2, ge=0.0, le=1.0, description="Probability of shadow blobs")
    p_bleed: float = Field(0.3, ge=0.0, le=1.0, description="Probability of ink bleeding")
    p_fade: float = Field(0.3, ge=0.0, le=1.0, description="Probability of ink fading")
    lighting_strength: float = Field(0.35, ge=0.0, le=1.0, description="Maximum darkening of the lighting field")
    line_count_range: Tuple[int, int] = Field((1, 3), description="Inclusive range of noise lines")
    bleed_radius: int = Field(1, ge=0, description="Ink dilation radius in pixels")
    fade_gamma: float = Field(0.6, gt=0.0, description="Fade exponent; below 1 lightens ink")
    order: List[str] = Field(default_factory=lambda: list(AUGMENT_STEPS), description="Effect order")
    texture: TextureSource = Field(default_factory=TextureSource, description="Paper texture source")
    seed: int = Field(0, description="Augmentation seed")

    @field_validator("line_count_range")
    @classmethod
    def _ordered_range(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        low, high = value
        if low < 0 or low > high:
            raise ValueError("line_count_range must satisfy 0 <= min <= max")
        return value

    @field_validator("order")
    @classmethod
    def _known_steps(cls, value: List[str]) -> List[str]:
        unknown = [step for step in value if step not in AUGMENT_STEPS]
        if unknown:
            raise ValueError(f"unknown augment steps: {unknown}")
        return value


# ============================================================================
# Curation
# ============================================================================

class DedupConfig(BaseModel):
    """Edit-distance deduplication settings."""

    model_config = ConfigDict(extra="forbid")

    normalized_threshold: float = Field(0.10, ge=0.0, le=1.0, description="Max distance / max length for duplicates")
    bucket_width: int = Field(16, ge=1, description="Token-length bucket width")


class CurateConfig(BaseModel):
    """Image and formula filters."""

    model_config = ConfigDict(extra="forbid")

    min_aspect: float = Field(0.1, gt=0.0, description="Minimum ink box width/height")
    max_aspect: float = Field(25.0, gt=0.0, description="Maximum ink box width/height")
    margin: int = Field(4, ge=0, description="Ink must stay this far from the image edge")
    center_tol: float = Field(0.1, ge=0.0, le=0.5, description="Allowed center deviation as a fraction of size")
    max_repeats: int = Field(6, ge=2, description="Longest allowed back-to-back repetition")
    dedup: DedupConfig = Field(default_factory=DedupConfig, description="Deduplication settings")

    @model_validator(mode="after")
    def _aspect_order(self) -> "CurateConfig":
        if self.min_aspect > self.max_aspect:
            raise ValueError("min_aspect must not exceed max_aspect")
        return self


class FilterReason(str, Enum):
    """Why a candidate record was dropped."""

    ASPECT_RATIO = "AspectRatio"
    BOUNDARY_OVERFLOW = "BoundaryOverflow"
    NOT_CENTERED = "NotCentered"
    REPETITION = "Repetition"
    RENDER_FAIL = "RenderFail"
    DUPLICATE = "Duplicate"


class Verdict(str, Enum):
    KEEP = "keep"
    DROP = "drop"


class FilterReport(BaseModel):
    """Keep/drop decision for one candidate."""

    record_id: str = Field(..., description="Candidate identifier")
    verdict: Verdict = Field(..., description="keep or drop")
    reasons: List[FilterReason] = Field(default_factory=list, description="Drop reasons")
    category: Optional[Category] = Field(None, description="Candidate category, for statistics")
    detail: str = Field("", description="Free-form detail such as the render failure kind")

    @model_validator(mode="after")
    def _drop_has_reason(self) -> "FilterReport":
        if self.verdict == Verdict.DROP and not self.reasons:
            raise ValueError("a dropped record needs at least one reason")
        return self


# ============================================================================
# Metrics
# ============================================================================

class SearchMode(str, Enum):
    """How the EPMR offset grid is searched."""

    EXACT = "exact"
    FFT = "fft"
    COARSE = "coarse"


class EpmrConfig(BaseModel):
    """Offset search radius, dilation radius and binarization threshold."""

    model_config = ConfigDict(extra="forbid")

    offset: int = Field(20, ge=0, description="Shift search radius in pixels")
    dil_size: int = Field(2, ge=0, description="Dilation radius applied to the prediction")
    binarize_threshold: int = Field(128, ge=0, le=255, description="Pixels strictly below this are ink")
    search: SearchMode = Field(SearchMode.EXACT, description="Offset search strategy")


class ScorePair(BaseModel):
    """Per-sample evaluation result."""

    id: str = Field(..., description="Pair identifier")
    epmr: float = Field(0.0, ge=0.0, le=100.0, description="EPMR on the 0-100 scale")
    render_failed: bool = Field(False, description="Prediction failed to render")
    failure_kind: Optional[RenderFailureKind] = Field(None, description="Render failure class")
    exprate_exact: bool = Field(False, description="Token sequences match exactly")
    exprate_le1: bool = Field(False, description="Within one token edit")
    exprate_le2: bool = Field(False, description="Within two token edits")
    edit_distance: Optional[int] = Field(None, description="Token edit distance when at most 2")
    error: Optional[str] = Field(None, description="Evaluation error, e.g. reference render failure")

    @model_validator(mode="after")
    def _failed_scores_zero(self) -> "ScorePair":
        if self.render_failed and self.epmr != 0.0:
            raise ValueError("a failed render must score 0")
        return self


class EvalAggregates(BaseModel):
    """Benchmark-level scores, all percentages on the 0-100 scale."""

    n: int = Field(0, ge=0, description="Samples scored")
    n_errors: int = Field(0, ge=0, description="Samples excluded because of evaluation errors")
    fr: float = Field(0.0, description="Failure rate")
    epmr: float = Field(0.0, description="Mean EPMR")
    ep_at: Dict[str, float] = Field(default_factory=dict, description="EP@N keyed by N")
    exprate: float = Field(0.0, description="Exact command-level match rate")
    exprate_le1: float = Field(0.0, description="Match rate within one edit")
    exprate_le2: float = Field(0.0, description="Match rate within two edits")


class EvalReport(BaseModel):
    """Per-sample scores plus aggregates."""

    per_sample: List[ScorePair] = Field(default_factory=list, description="Scores in input order")
    aggregates: EvalAggregates = Field(default_factory=EvalAggregates, description="Aggregate scores")
    config: Dict[str, Any] = Field(default_factory=dict, description="Settings used for the run")

    def to_csv(self, path: Path) -> None:
        """Write one row per sample."""
        columns = list(ScorePair.model_fields)
        with Path(path).open("w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=columns)
            writer.writeheader()
            for score in self.per_sample:
                writer.writerow(score.model_dump(mode="json"))


class EvalPair(BaseModel):
    """One prediction/reference pair."""

    id: str = Field(..., description="Pair identifier")
    pred: str = Field(..., description="Predicted LaTeX")
    ref: str = Field(..., description="Reference LaTeX")


# ============================================================================
# Dataset
# ============================================================================

class DatasetRecord(BaseModel):
    """One synthesized sample in a manifest."""

    id: str = Field(..., description="Stable hash of latex, font and seed")
    latex: str = Field(..., description="Formula source")
    category: Category = Field(..., description="Taxonomy category")
    char_length: int = Field(..., ge=0, description="Whitespace-normalized character length")
    token_length: int = Field(..., ge=0, description="Non-whitespace token count")
    image_path: str = Field("", description="Image path relative to the output directory")
    font_id: str = Field("cm", description="Font used for rendering")
    seed: int = Field(0, description="Per-record seed")
    provenance: Provenance = Field(Provenance.EXTRACTED, description="Origin of the formula")
    augment_applied: List[str] = Field(default_factory=list, description="Augmentation effects applied")


class CategoryStats(BaseModel):
    """Table-1 style row for one category."""

    count: int = Field(0, ge=0, description="Kept records")
    proportion: float = Field(0.0, description="Share of kept records, percent")
    render_fail_rate: float = Field(0.0, description="Render failures among rendered candidates, percent")
    avg_char_length: float = Field(0.0, description="Mean character length")
    avg_token_length: float = Field(0.0, description="Mean token length")


class HistogramBucket(BaseModel):
    """One bucket of the character-length histogram."""

    lower: int = Field(..., ge=0, description="Inclusive lower edge")
    upper: Optional[int] = Field(None, description="Exclusive upper edge, None for the open tail")
    count: int = Field(0, ge=0, description="Records in the bucket")

    @property
    def label(self) -> str:
        return f"[{self.lower},{self.upper})" if self.upper is not None else f"[{self.lower},inf)"


class BuildStats(BaseModel):
    """Statistics of a manifest and its drops."""

    categories: Dict[str, CategoryStats] = Field(default_factory=dict, description="Per-category rows")
    total_kept: int = Field(0, ge=0, description="Records in the manifest")
    total_dropped: int = Field(0, ge=0, description="Dropped candidates")
    drop_reasons: Dict[str, int] = Field(default_factory=dict, description="Drop count per reason")
    length_histogram: List[HistogramBucket] = Field(default_factory=list, description="Character-length histogram")
