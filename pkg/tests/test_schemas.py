"""
Unit tests for Pydantic schemas.
Tests data validation, defaults and invariants.
"""

from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from src.schemas import (
    AugmentConfig,
    Category,
    ConfigError,
    CurateConfig,
    DatasetRecord,
    EnhanceConfig,
    EnhanceError,
    EpmrConfig,
    EvalReport,
    HistogramBucket,
    LatexFormula,
    MarkdownDoc,
    Provenance,
    ReferenceRenderError,
    RendererUnavailable,
    RenderFailure,
    RenderFailureKind,
    RenderOutcome,
    RenderSpec,
    ScorePair,
    SearchMode,
    SubstitutionTable,
    TexforgeError,
    TextureError,
    TextureMode,
    TextureSource,
)


# ============================================================================
# Error Hierarchy Tests
# ============================================================================

@pytest.mark.unit
@pytest.mark.schema
class TestErrors:
    """Tests for the exception hierarchy."""

    @pytest.mark.parametrize("error", [
        ConfigError, EnhanceError, RendererUnavailable, ReferenceRenderError, TextureError,
    ])
    def test_base_class(self, error):
        """Test that every error derives from TexforgeError."""
        assert issubclass(error, TexforgeError)


# ============================================================================
# Formula and Document Tests
# ============================================================================

@pytest.mark.unit
@pytest.mark.schema
class TestFormulaSchemas:
    """Tests for LatexFormula and MarkdownDoc."""

    def test_formula_defaults(self):
        """Test LatexFormula defaults."""
        formula = LatexFormula(source="x")

        assert formula.tokens == []
        assert formula.category == Category.SINGLE_LINE
        assert formula.provenance == Provenance.EXTRACTED

    def test_formula_negative_length(self):
        """Test that lengths are non-negative."""
        with pytest.raises(ValidationError):
            LatexFormula(source="x", char_length=-1)

    def test_doc_id_default(self):
        """Test that doc_id falls back to the file name."""
        doc = MarkdownDoc(path=Path("corpus/sub/paper.md"), text="")

        assert doc.doc_id == "paper.md"

    def test_doc_id_explicit(self):
        """Test that an explicit doc_id is kept."""
        assert MarkdownDoc(path=Path("a.md"), text="", doc_id="sub/a.md").doc_id == "sub/a.md"


# ============================================================================
# Enhancement Config Tests
# ============================================================================

@pytest.mark.unit
@pytest.mark.schema
class TestEnhanceSchemas:
    """Tests for EnhanceConfig and SubstitutionTable."""

    def test_defaults(self):
        """Test default probabilities."""
        cfg = EnhanceConfig()

        assert cfg.short_formula_fraction == 0.20
        assert cfg.snippet_words == (2, 6)
        assert ["+", "-", "\\pm", "\\mp"] in cfg.substitution.operators

    @pytest.mark.parametrize("field", ["p_hcat", "p_vcat", "p_subst", "p_text_inject", "short_formula_fraction"])
    def test_probability_bounds(self, field):
        """Test that probabilities must lie in [0, 1]."""
        with pytest.raises(ValidationError):
            EnhanceConfig(**{field: 1.5})
        with pytest.raises(ValidationError):
            EnhanceConfig(**{field: -0.1})

    @pytest.mark.parametrize("words", [(0, 3), (5, 2)])
    def test_snippet_words(self, words):
        """Test snippet word bounds."""
        with pytest.raises(ValidationError):
            EnhanceConfig(snippet_words=words)

    def test_overlapping_classes(self):
        """Test that a lexeme may belong to one class only."""
        with pytest.raises(ValidationError, match="more than one class"):
            SubstitutionTable(operators=[["+", "-"], ["-", "\\pm"]])

    def test_bracket_overlaps_operator(self):
        """Test that brackets and operators share one namespace."""
        with pytest.raises(ValidationError):
            SubstitutionTable(operators=[["<", ">"]], brackets=[("<", ">")])

    def test_singleton_class(self):
        """Test that a class needs two members."""
        with pytest.raises(ValidationError, match="at least two"):
            SubstitutionTable(operators=[["+"]])

    def test_unknown_key(self):
        """Test that unknown keys are rejected."""
        with pytest.raises(ValidationError):
            EnhanceConfig(p_teleport=0.5)


# ============================================================================
# Rendering Schema Tests
# ============================================================================

@pytest.mark.unit
@pytest.mark.schema
class TestRenderSchemas:
    """Tests for RenderSpec and RenderOutcome."""

    def test_spec_bounds(self):
        """Test dpi and timeout lower bounds."""
        with pytest.raises(ValidationError):
            RenderSpec(latex="x", dpi=10)
        with pytest.raises(ValidationError):
            RenderSpec(latex="x", timeout_ms=10)

    def test_outcome_image(self):
        """Test a successful outcome."""
        outcome = RenderOutcome(image=np.zeros((2, 2), dtype=np.uint8))

        assert outcome.ok
        assert not outcome.from_cache

    def test_outcome_failure(self):
        """Test a failed outcome."""
        outcome = RenderOutcome(failure=RenderFailure(kind=RenderFailureKind.TIMEOUT))

        assert not outcome.ok

    def test_outcome_exactly_one(self):
        """Test that an outcome holds an image or a failure, never both or neither."""
        with pytest.raises(ValidationError):
            RenderOutcome()
        with pytest.raises(ValidationError):
            RenderOutcome(image=np.zeros((1, 1), dtype=np.uint8), failure=RenderFailure(kind=RenderFailureKind.TIMEOUT))


# ============================================================================
# Augmentation and Curation Schema Tests
# ============================================================================

@pytest.mark.unit
@pytest.mark.schema
class TestAugmentCurateSchemas:
    """Tests for TextureSource, AugmentConfig and CurateConfig."""

    def test_directory_needs_dir(self):
        """Test that Directory mode requires a directory."""
        with pytest.raises(ValidationError):
            TextureSource(mode=TextureMode.DIRECTORY)

    def test_texture_from_strings(self):
        """Test coercion from TOML-style values."""
        source = TextureSource(mode="Directory", dir="textures")

        assert source.mode == TextureMode.DIRECTORY
        assert source.dir == Path("textures")

    def test_augment_defaults(self):
        """Test the default effect order."""
        assert AugmentConfig().order == ["compose", "ink", "paper"]

    def test_line_count_range(self):
        """Test the ordered line-count range."""
        with pytest.raises(ValidationError):
            AugmentConfig(line_count_range=(3, 1))

    def test_fade_gamma_positive(self):
        """Test that the fade exponent is positive."""
        with pytest.raises(ValidationError):
            AugmentConfig(fade_gamma=0.0)

    def test_aspect_order(self):
        """Test that min_aspect cannot exceed max_aspect."""
        with pytest.raises(ValidationError):
            CurateConfig(min_aspect=5.0, max_aspect=1.0)

    def test_center_tol_bound(self):
        """Test the centering tolerance upper bound."""
        with pytest.raises(ValidationError):
            CurateConfig(center_tol=0.6)

    def test_dedup_defaults(self):
        """Test nested dedup defaults."""
        cfg = CurateConfig()

        assert cfg.dedup.normalized_threshold == 0.10
        assert cfg.dedup.bucket_width == 16


# ============================================================================
# Metrics and Dataset Schema Tests
# ============================================================================

@pytest.mark.unit
@pytest.mark.schema
class TestMetricsDatasetSchemas:
    """Tests for metric results and dataset records."""

    def test_epmr_defaults(self):
        """Test EPMR defaults."""
        cfg = EpmrConfig()

        assert (cfg.offset, cfg.dil_size, cfg.binarize_threshold) == (20, 2, 128)
        assert cfg.search == SearchMode.EXACT

    def test_epmr_negative(self):
        """Test non-negative offset and dilation."""
        with pytest.raises(ValidationError):
            EpmrConfig(offset=-1)
        with pytest.raises(ValidationError):
            EpmrConfig(dil_size=-1)

    def test_score_range(self):
        """Test that EPMR stays within 0-100."""
        with pytest.raises(ValidationError):
            ScorePair(id="x", epmr=100.5)

    def test_report_serialization(self):
        """Test the JSON shape of an evaluation report."""
        report = EvalReport(per_sample=[ScorePair(id="a", epmr=50.0)], config={"offset": 20})
        payload = report.model_dump(mode="json")

        assert payload["per_sample"][0]["epmr"] == 50.0
        assert payload["aggregates"]["n"] == 0
        assert payload["config"] == {"offset": 20}

    def test_record_json(self):
        """Test that enums serialize as their names."""
        record = DatasetRecord(id="abc", latex="x", category=Category.TEXT_HYBRID, char_length=1, token_length=1)
        payload = record.model_dump(mode="json")

        assert payload["category"] == "TextHybrid"
        assert payload["provenance"] == "Extracted"
        assert DatasetRecord.model_validate_json(record.model_dump_json()) == record

    def test_histogram_label(self):
        """Test bucket labels."""
        assert HistogramBucket(lower=50, upper=100).label == "[50,100)"
        assert HistogramBucket(lower=1000).label == "[1000,inf)"
