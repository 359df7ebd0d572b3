"""
Unit tests for expression enhancement.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.enhance import (
    HCAT_SEPARATORS,
    Enhancer,
    concat_horizontal,
    concat_vertical,
    derive_seed,
    gen_short_formula,
    inject_text,
    item_rng,
    load_lexicon,
    replace_text,
    substitute,
)
from src.latex_core import is_valid, make_formula
from src.schemas import (
    Category,
    EnhanceConfig,
    EnhanceError,
    Provenance,
    SubstitutionTable,
    TokenKind,
)

POOL_SOURCES = [
    "a+b=c",
    "\\frac{x}{y}",
    "(a+b)^2",
    "\\left( x \\right)",
    "f(x) \\le 1",
    "\\alpha \\cdot \\beta",
    "\\begin{aligned} a &= b \\end{aligned}",
    "\\text{if and only if} x > 0",
    "\\begin{tabular}{c} a \\end{tabular}",
    "[0, 1)",
    "\\sqrt[3]{x} - y",
    "\\phi",
]
CJK_WORDS = ["函数", "定义", "其中", "所有", "常数"]


def formulas(*sources):
    return [make_formula(source) for source in sources]


@pytest.fixture
def pool():
    return formulas(*POOL_SOURCES)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ============================================================================
# Seeding Tests
# ============================================================================

@pytest.mark.unit
@pytest.mark.enhance
class TestSeeding:
    """Tests for per-item seed derivation."""

    def test_derive_seed_deterministic(self):
        """Test that the same (seed, id) pair gives the same seed."""
        assert derive_seed(7, "abc") == derive_seed(7, "abc")

    def test_derive_seed_varies(self):
        """Test that item ids and global seeds both matter."""
        assert derive_seed(7, 1) != derive_seed(7, 2)
        assert derive_seed(7, 1) != derive_seed(8, 1)
        assert 0 <= derive_seed(7, 1) < 2 ** 64

    def test_item_rng_reproducible(self):
        """Test that per-item generators replay the same stream."""
        assert item_rng(3, 9).random(5).tolist() == item_rng(3, 9).random(5).tolist()


# ============================================================================
# Concatenation Tests
# ============================================================================

@pytest.mark.unit
@pytest.mark.enhance
class TestConcatHorizontal:
    """Tests for concat_horizontal."""

    def test_explicit_separator(self, rng):
        """Test the joined source."""
        result = concat_horizontal(formulas("a=b", "c=d"), rng, separator=",\\quad")

        assert result.source == "a=b ,\\quad c=d"
        assert result.provenance == Provenance.ENHANCED
        assert is_valid(result.source)

    def test_single_unit_rejected(self, rng):
        """Test the minimum unit count."""
        with pytest.raises(EnhanceError):
            concat_horizontal(formulas("a=b"), rng)

    def test_too_many_units_rejected(self, rng):
        """Test the maximum unit count."""
        with pytest.raises(EnhanceError):
            concat_horizontal(formulas("a", "b", "c", "d"), rng, max_units=3)

    @pytest.mark.parametrize("source", ["x = y \\\\ y = z", "\\begin{tabular}{c} a \\end{tabular}"])
    def test_blocks_rejected(self, rng, source):
        """Test that MultiLine and Table units cannot be inlined."""
        with pytest.raises(EnhanceError):
            concat_horizontal(formulas("a=b", source), rng)

    def test_unknown_separator(self, rng):
        """Test that only documented separators are accepted."""
        with pytest.raises(EnhanceError):
            concat_horizontal(formulas("a", "b"), rng, separator=";")

    def test_three_symbols(self):
        """Test category and separator count for three symbol units."""
        units = formulas("\\phi", "\\tilde{w}", "x^2")
        for seed in range(100):
            result = concat_horizontal(units, np.random.default_rng(seed))

            assert result.category == Category.SINGLE_LINE
            assert sum(result.source.count(f" {sep} ") for sep in HCAT_SEPARATORS) == 2


@pytest.mark.unit
@pytest.mark.enhance
class TestConcatVertical:
    """Tests for concat_vertical."""

    def test_aligned_rows(self, rng):
        """Test the stacked source."""
        result = concat_vertical(formulas("x=1", "y=2"), rng, wrapper="aligned")

        assert result.source == "\\begin{aligned} x=1 \\\\ y=2 \\end{aligned}"
        assert result.category == Category.MULTI_LINE

    def test_nested_aligned_uses_gathered(self):
        """Test that aligned blocks are stacked under gathered."""
        units = formulas("\\begin{aligned} a &= b \\end{aligned}", "c = d")
        for seed in range(20):
            result = concat_vertical(units, np.random.default_rng(seed))

            assert result.source.startswith("\\begin{gathered}")
            assert is_valid(result.source)

    def test_token_length_grows(self, rng):
        """Test that the wrapper only adds tokens."""
        units = formulas("x=1", "\\frac{a}{b}")
        result = concat_vertical(units, rng)

        assert result.token_length >= sum(unit.token_length for unit in units)

    def test_rejects(self, rng):
        """Test preconditions."""
        with pytest.raises(EnhanceError):
            concat_vertical(formulas("x=1"), rng)
        with pytest.raises(EnhanceError):
            concat_vertical(formulas("x=1", "\\begin{tabular}{c} a \\end{tabular}"), rng)
        with pytest.raises(EnhanceError):
            concat_vertical(formulas("x=1", "\\frac{a}"), rng)


# ============================================================================
# Substitution Tests
# ============================================================================

@pytest.mark.unit
@pytest.mark.enhance
class TestSubstitute:
    """Tests for substitute."""

    def test_zero_probability_is_identity(self, rng):
        """Test that p_subst=0 leaves the formula alone."""
        formula = make_formula("(a+b) \\cdot c < d")

        assert substitute(formula, SubstitutionTable(), 0.0, rng).source == formula.source

    def test_operator_replaced(self):
        """Test that every member is replaced by another member of its class."""
        table = SubstitutionTable(operators=[["+", "-", "\\pm"]], brackets=[])
        for seed in range(50):
            result = substitute(make_formula("a+b"), table, 1.0, np.random.default_rng(seed))
            operator = result.tokens[1].text

            assert operator in {"-", "\\pm"}
            assert result.provenance == Provenance.ENHANCED

    def test_brackets_replaced_in_pairs(self):
        """Test that a bracket pair is always replaced by a matched pair."""
        expected = {"[a]", "\\{a\\}", "\\langle a\\rangle", "\\lvert a\\rvert"}
        for seed in range(300):
            result = substitute(make_formula("(a)"), SubstitutionTable(), 1.0, np.random.default_rng(seed))

            assert result.source in expected

    def test_half_open_interval_untouched(self):
        """Test that mismatched brackets are left as they are."""
        table = SubstitutionTable(operators=[["+", "-"]])
        result = substitute(make_formula("[0, 1)"), table, 1.0, np.random.default_rng(0))

        assert result.source == "[0, 1)"

    def test_tables_untouched(self):
        """Test that tables are never substituted."""
        formula = make_formula("\\begin{tabular}{c} a + b \\end{tabular}")

        assert substitute(formula, SubstitutionTable(), 1.0, np.random.default_rng(0)) is formula

    def test_column_spec_protected(self):
        """Test that array column specifications keep their lexemes."""
        formula = make_formula("\\begin{array}{c|c} a + b & (c) \\\\ d & e \\end{array}")
        for seed in range(20):
            result = substitute(formula, SubstitutionTable(), 1.0, np.random.default_rng(seed))

            assert result.source.startswith("\\begin{array}{c|c}")
            assert is_valid(result.source)

    def test_probability_bounds(self, rng):
        """Test that probabilities outside [0, 1] are rejected."""
        with pytest.raises(EnhanceError):
            substitute(make_formula("a+b"), SubstitutionTable(), 1.5, rng)

    @given(st.integers(min_value=0, max_value=2 ** 32), st.sampled_from([s for s in POOL_SOURCES if s != "[0, 1)"]))
    @settings(max_examples=150)
    def test_balance_preserved(self, seed, source):
        """Test that substitution keeps validity and equal open/close counts per pair."""
        table = SubstitutionTable()
        result = substitute(make_formula(source), table, 0.7, np.random.default_rng(seed))
        lexemes = [token.text for token in result.tokens]

        assert is_valid(result.source)
        for opening, closing in table.brackets:
            assert lexemes.count(opening) == lexemes.count(closing)


# ============================================================================
# Text Injection Tests
# ============================================================================

@pytest.mark.unit
@pytest.mark.enhance
class TestInjectText:
    """Tests for inject_text and replace_text."""

    def test_empty_lexicon(self, rng):
        """Test that an empty lexicon is an error."""
        with pytest.raises(EnhanceError):
            inject_text(make_formula("x=y"), [], rng)

    def test_prefix(self, rng):
        """Test the prefix position with explicit words."""
        result = inject_text(make_formula("x=y"), ["where"], rng, position="prefix", words=["where"])

        assert result.source == "\\text{where}\\; x=y"

    def test_suffix(self, rng):
        """Test the suffix position."""
        result = inject_text(make_formula("x=y"), ["for", "all"], rng, position="suffix", words=["for", "all"])

        assert result.source == "x=y \\;\\text{for all}"
        assert result.category == Category.TEXT_HYBRID

    def test_between_units(self, rng):
        """Test insertion between concatenated units."""
        joined = concat_horizontal(formulas("a=b", "c=d"), rng, separator=",\\quad")
        result = inject_text(joined, ["hence"], rng, position="between", words=["hence"])

        assert result.source == "a=b ,\\quad \\text{hence}\\; c=d"

    def test_between_unavailable(self, rng):
        """Test that 'between' needs a concatenated formula."""
        with pytest.raises(EnhanceError):
            inject_text(make_formula("x=y"), ["w"], rng, position="between")

    def test_word_count(self):
        """Test that between one and six words are drawn."""
        for seed in range(50):
            result = inject_text(make_formula("x"), ["w"], np.random.default_rng(seed))
            text = next(t.text for t in result.tokens if t.kind == TokenKind.TEXT)

            assert 1 <= len(text.split()) <= 6

    def test_cjk_lexicon(self):
        """Test that foreign words inject as a valid text group."""
        for seed in range(20):
            result = inject_text(make_formula("a+b=c"), CJK_WORDS, np.random.default_rng(seed))
            text = next(t.text for t in result.tokens if t.kind == TokenKind.TEXT)

            assert any("一" <= ch <= "鿿" for ch in text)
            assert is_valid(result.source)

    def test_special_characters_removed(self, rng):
        """Test that LaTeX specials never reach the text group."""
        result = inject_text(make_formula("x"), [], rng, position="prefix", words=["50%", "a_b"])

        assert result.source == "\\text{50 ab}\\; x"

    def test_table_rejected(self, rng):
        """Test that text is never injected into tables."""
        with pytest.raises(EnhanceError):
            inject_text(make_formula("\\begin{tabular}{c} a \\end{tabular}"), ["w"], rng)

    def test_replace_text(self, rng):
        """Test that existing text groups are rewritten word for word."""
        result = replace_text(make_formula("x \\text{if and only if} y"), CJK_WORDS, rng)
        text = next(t.text for t in result.tokens if t.kind == TokenKind.TEXT)

        assert len(text.split()) == 4
        assert all(word in CJK_WORDS for word in text.split())
        assert is_valid(result.source)

    def test_replace_text_without_groups(self, rng):
        """Test that formulas without text are returned unchanged."""
        formula = make_formula("x=y")

        assert replace_text(formula, CJK_WORDS, rng) is formula


# ============================================================================
# Short Formula Tests
# ============================================================================

@pytest.mark.unit
@pytest.mark.enhance
class TestGenShortFormula:
    """Tests for gen_short_formula."""

    def test_all_symbols(self):
        """Test that generated formulas are short valid symbols."""
        for seed in range(500):
            formula = gen_short_formula(np.random.default_rng(seed))

            assert formula.category == Category.SYMBOL
            assert formula.provenance == Provenance.GENERATED
            assert formula.token_length <= 6
            assert is_valid(formula.source)

    def test_deterministic(self):
        """Test that a seed fixes the output."""
        first = gen_short_formula(np.random.default_rng(11)).source

        assert gen_short_formula(np.random.default_rng(11)).source == first

    def test_variety(self):
        """Test that draws cover several shapes."""
        outputs = {gen_short_formula(np.random.default_rng(seed)).source for seed in range(200)}

        assert len(outputs) > 50
        assert any(source.startswith("\\tilde") or source.startswith("\\hat") for source in outputs)


# ============================================================================
# Lexicon and Enhancer Tests
# ============================================================================

@pytest.mark.unit
@pytest.mark.enhance
class TestEnhancer:
    """Tests for load_lexicon and Enhancer."""

    def test_load_lexicon(self, tmp_path):
        """Test comments, blank lines and special characters."""
        path = tmp_path / "words.txt"
        path.write_text("# header\n\nfoo$bar\n词\n  spaced  \n", encoding="utf-8")

        assert load_lexicon(path) == ["foobar", "词", "spaced"]

    def test_lexicons_loaded(self, tmp_path):
        """Test the built-in, configured and prose lexicons."""
        path = tmp_path / "chinese.txt"
        path.write_text("\n".join(CJK_WORDS), encoding="utf-8")
        enhancer = Enhancer(EnhanceConfig(lexicons={"chinese": str(path)}), snippets=["plain words here"])

        assert set(enhancer.lexicons) == {"english", "chinese", "prose"}
        assert enhancer.lexicons["chinese"] == CJK_WORDS

    def test_table_untouched(self, pool):
        """Test that Table units pass through."""
        config = EnhanceConfig(p_hcat=1.0, p_vcat=0.0, p_subst=1.0, p_text_inject=1.0)
        table = make_formula("\\begin{tabular}{c} a \\end{tabular}")

        assert Enhancer(config).enhance(table, pool, np.random.default_rng(0)) is table

    def test_deterministic(self, pool):
        """Test that the same per-item seed gives the same output."""
        enhancer = Enhancer(EnhanceConfig(p_hcat=0.5, p_vcat=0.3, p_subst=0.5, p_text_inject=0.5))
        for index, unit in enumerate(pool):
            first = enhancer.enhance(unit, pool, item_rng(5, index)).source
            second = enhancer.enhance(unit, pool, item_rng(5, index)).source

            assert first == second

    def test_closure(self, pool):
        """Test that enhancing valid units always yields valid formulas."""
        config = EnhanceConfig(p_hcat=0.4, p_vcat=0.4, p_subst=0.5, p_text_inject=0.5, p_text_replace=0.5)
        enhancer = Enhancer(config, snippets=["the energy is conserved"])
        for seed in range(200):
            rng = np.random.default_rng(seed)
            unit = pool[seed % len(pool)]
            result = enhancer.enhance(unit, pool, rng)

            assert is_valid(result.source), result.source

    def test_disabled_is_identity(self, pool):
        """Test that zero probabilities return the unit itself."""
        config = EnhanceConfig(p_hcat=0.0, p_vcat=0.0, p_subst=0.0, p_text_inject=0.0)

        for unit in pool:
            assert Enhancer(config).enhance(unit, pool, np.random.default_rng(1)).source == unit.source

    def test_bundled_chinese_lexicon(self, data_path):
        """Test that the sample CJK lexicon loads every word intact."""
        words = load_lexicon(data_path / "lexicons" / "chinese.txt")

        assert len(words) == 40
        assert all(any("一" <= ch <= "鿿" for ch in word) for word in words)
