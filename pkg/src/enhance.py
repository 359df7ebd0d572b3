"""Expression enhancement: concatenation, substitution, text mixing and short formulas."""

import hashlib
import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.latex_core import (
    env_name,
    join_lexemes,
    make_formula,
    normalize_whitespace,
    validate,
)
from src.schemas import (
    Category,
    EnhanceConfig,
    EnhanceError,
    LatexFormula,
    Provenance,
    SubstitutionTable,
    Token,
    TokenKind,
)

logger = logging.getLogger(__name__)

HCAT_SEPARATORS = (",\\;", ",\\quad", "\\;", "\\qquad")
VCAT_WRAPPERS = ("aligned", "gathered")
MAX_INJECTED_WORDS = 6

GREEK_LETTERS = (
    "\\alpha", "\\beta", "\\gamma", "\\delta", "\\epsilon", "\\varepsilon", "\\zeta", "\\eta",
    "\\theta", "\\vartheta", "\\iota", "\\kappa", "\\lambda", "\\mu", "\\nu", "\\xi", "\\pi",
    "\\rho", "\\sigma", "\\tau", "\\upsilon", "\\phi", "\\varphi", "\\chi", "\\psi", "\\omega",
    "\\Gamma", "\\Delta", "\\Theta", "\\Lambda", "\\Xi", "\\Pi", "\\Sigma", "\\Phi", "\\Psi", "\\Omega",
)
LATIN_LETTERS = tuple("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ")
ACCENTS = ("\\tilde", "\\hat", "\\bar", "\\vec", "\\dot")
SUBSCRIPTS = tuple("0123456789ijkmnt")
SUPERSCRIPTS = tuple("0123456789nk") + ("\\prime",)

BUILTIN_ENGLISH = (
    "where", "for", "all", "and", "if", "then", "otherwise", "with", "such", "that",
    "let", "be", "the", "function", "defined", "on", "some", "any", "each", "given",
    "hence", "thus", "since", "we", "have", "is", "a", "constant", "real", "number",
    "integer", "set", "of", "solution", "in", "as", "holds", "when", "almost", "everywhere",
)

# Characters that are special in LaTeX text mode.
_TEXT_SPECIALS = re.compile(r"[\\{}$&#^_%~]")


def derive_seed(global_seed: int, item_id: Union[int, str]) -> int:
    """Per-item seed derived from the global seed, independent of processing order."""
    digest = hashlib.sha256(f"{global_seed}:{item_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def item_rng(global_seed: int, item_id: Union[int, str]) -> np.random.Generator:
    """Seeded generator for one item."""
    return np.random.default_rng(derive_seed(global_seed, item_id))


def _pick(rng: np.random.Generator, items: Sequence):
    return items[int(rng.integers(len(items)))]


def _sanitize_word(word: str) -> str:
    return _TEXT_SPECIALS.sub("", word).strip()


def load_lexicon(path: Union[str, Path]) -> List[str]:
    """Read a lexicon file with one word per line.

    Blank lines and lines starting with '#' are skipped; LaTeX special
    characters are removed from each word.
    """
    words = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        word = _sanitize_word(line)
        if word:
            words.append(word)
    return words


def _require_valid(units: Sequence[LatexFormula]) -> None:
    for unit in units:
        if validate(unit.tokens) is not None:
            raise EnhanceError(f"unit does not validate: {unit.source!r}")


# ============================================================================
# Concatenation
# ============================================================================

def concat_horizontal(
    units: Sequence[LatexFormula],
    rng: np.random.Generator,
    separator: Optional[str] = None,
    max_units: int = 3,
) -> LatexFormula:
    """Join unit formulas on one line with a separator.

    Args:
        units: Between 2 and `max_units` validate-ok units, none MultiLine or Table
        rng: Generator choosing the separator when none is given
        separator: One of HCAT_SEPARATORS
        max_units: Upper bound on the number of units

    Returns:
        Enhanced formula "u1 sep u2 sep ..."

    Raises:
        EnhanceError: If a precondition is violated
    """
    if not 2 <= len(units) <= max_units:
        raise EnhanceError(f"horizontal concatenation needs 2..{max_units} units, got {len(units)}")
    for unit in units:
        if unit.category in (Category.MULTI_LINE, Category.TABLE):
            raise EnhanceError(f"{unit.category.value} units cannot be inlined")
    _require_valid(units)
    if separator is None:
        separator = _pick(rng, HCAT_SEPARATORS)
    elif separator not in HCAT_SEPARATORS:
        raise EnhanceError(f"unknown separator {separator!r}")
    source = f" {separator} ".join(normalize_whitespace(unit.source) for unit in units)
    return make_formula(source, Provenance.ENHANCED)


def _contains_env(unit: LatexFormula, names: Tuple[str, ...]) -> bool:
    return any(
        token.kind == TokenKind.ENV_BEGIN and env_name(token) in names
        for token in unit.tokens
    )


def concat_vertical(
    units: Sequence[LatexFormula],
    rng: np.random.Generator,
    wrapper: Optional[str] = None,
) -> LatexFormula:
    """Stack unit formulas as rows of an aligned or gathered block.

    Units that already contain an aligned/align block are always stacked
    under `gathered`.

    Args:
        units: At least 2 validate-ok units, none Table
        rng: Generator choosing the wrapper when none is given
        wrapper: "aligned" or "gathered"

    Returns:
        Enhanced MultiLine formula

    Raises:
        EnhanceError: If a precondition is violated
    """
    if len(units) < 2:
        raise EnhanceError(f"vertical concatenation needs at least 2 units, got {len(units)}")
    for unit in units:
        if unit.category == Category.TABLE:
            raise EnhanceError("Table units cannot be stacked")
    _require_valid(units)
    if any(_contains_env(unit, ("aligned", "align", "align*")) for unit in units):
        wrapper = "gathered"
    elif wrapper is None:
        wrapper = _pick(rng, VCAT_WRAPPERS)
    elif wrapper not in VCAT_WRAPPERS:
        raise EnhanceError(f"unknown wrapper {wrapper!r}")
    rows = " \\\\ ".join(normalize_whitespace(unit.source) for unit in units)
    return make_formula(f"\\begin{{{wrapper}}} {rows} \\end{{{wrapper}}}", Provenance.ENHANCED)


# ============================================================================
# Substitution
# ============================================================================

_NO_BRACKET_SWAP_AFTER = frozenset({"\\sqrt", "\\\\"})
_DELIMITER_COMMANDS = frozenset({
    "\\left", "\\right", "\\middle", "\\big", "\\Big", "\\bigg", "\\Bigg",
    "\\bigl", "\\bigr", "\\Bigl", "\\Bigr", "\\biggl", "\\biggr",
})
_DIMENSION_COMMANDS = frozenset({"\\hspace", "\\vspace", "\\kern", "\\mkern", "\\rule", "\\raisebox"})


def _depths(tokens: Sequence[Token]) -> List[int]:
    """Group/environment nesting depth before each token."""
    depths = []
    depth = 0
    for token in tokens:
        if token.kind in (TokenKind.GROUP_CLOSE, TokenKind.ENV_END):
            depth -= 1
        depths.append(depth)
        if token.kind in (TokenKind.GROUP_OPEN, TokenKind.ENV_BEGIN):
            depth += 1
    return depths


def _protected(tokens: Sequence[Token]) -> set:
    """Indices that must keep their lexeme: dimensions, optional row spacing, array column specs."""
    protected = set()
    for i, token in enumerate(tokens):
        opens_argument = (
            token.text in _DIMENSION_COMMANDS
            or (token.kind == TokenKind.ENV_BEGIN and env_name(token) in ("array", "tabular"))
        )
        if opens_argument and i + 1 < len(tokens) and tokens[i + 1].kind == TokenKind.GROUP_OPEN:
            depth = 0
            for j in range(i + 1, len(tokens)):
                protected.add(j)
                if tokens[j].kind == TokenKind.GROUP_OPEN:
                    depth += 1
                elif tokens[j].kind == TokenKind.GROUP_CLOSE:
                    depth -= 1
                    if depth == 0:
                        break
        elif token.kind == TokenKind.LINE_BREAK and i + 1 < len(tokens) and tokens[i + 1].text == "[":
            for j in range(i + 1, len(tokens)):
                protected.add(j)
                if tokens[j].text == "]":
                    break
    return protected


def _bracket_pairs(tokens: Sequence[Token], table: SubstitutionTable) -> List[Tuple[int, int, int]]:
    """Matched (open index, close index, pair index) triples, innermost first."""
    openers = {opening: index for index, (opening, _) in enumerate(table.brackets)}
    closers = {closing: index for index, (_, closing) in enumerate(table.brackets)}
    depths = _depths(tokens)
    protected = _protected(tokens)
    stack: List[Tuple[int, int]] = []
    pairs = []
    previous = ""
    for i, token in enumerate(tokens):
        if token.kind == TokenKind.WHITESPACE:
            continue
        text = token.text
        if i in protected:
            pass
        elif text in openers and previous not in _NO_BRACKET_SWAP_AFTER:
            stack.append((i, openers[text]))
        elif text in closers and stack:
            start, pair_index = stack[-1]
            # A pair never straddles braces or environments.
            if pair_index == closers[text] and depths[start] == depths[i]:
                stack.pop()
                pairs.append((start, i, pair_index))
            else:
                # Mismatched, e.g. a half-open interval: leave the region alone.
                stack.clear()
        previous = text
    return pairs


def substitute(
    formula: LatexFormula,
    table: SubstitutionTable,
    p_subst: float,
    rng: np.random.Generator,
) -> LatexFormula:
    """Swap operators and bracket pairs for other members of their class.

    Every class member is replaced independently with probability `p_subst`
    by a uniformly drawn different member; matched bracket pairs are
    replaced together by another pair.

    Args:
        formula: validate-ok formula
        table: Substitution classes
        p_subst: Per-occurrence replacement probability
        rng: Generator

    Returns:
        The input formula unchanged when nothing was replaced, else an Enhanced formula
    """
    if not 0.0 <= p_subst <= 1.0:
        raise EnhanceError("p_subst must be in [0, 1]")
    if p_subst == 0.0 or formula.category == Category.TABLE:
        return formula

    tokens = list(formula.tokens)
    protected = _protected(tokens)
    replaced = False

    operator_class = {member: cls for cls in table.operators for member in cls}
    previous = ""
    for i, token in enumerate(formula.tokens):
        if token.kind == TokenKind.WHITESPACE:
            continue
        cls = operator_class.get(token.text)
        eligible = (
            token.kind in (TokenKind.SYMBOL, TokenKind.COMMAND)
            and cls is not None
            and i not in protected
            and previous not in _DELIMITER_COMMANDS
        )
        previous = token.text
        if not eligible or rng.random() >= p_subst:
            continue
        new_text = _pick(rng, [member for member in cls if member != token.text])
        tokens[i] = _lexeme_token(new_text)
        replaced = True

    for start, end, pair_index in _bracket_pairs(formula.tokens, table):
        if rng.random() >= p_subst:
            continue
        others = [pair for index, pair in enumerate(table.brackets) if index != pair_index]
        if not others:
            continue
        opening, closing = _pick(rng, others)
        tokens[start] = _lexeme_token(opening)
        tokens[end] = _lexeme_token(closing)
        replaced = True

    if not replaced:
        return formula
    return make_formula(join_lexemes(tokens), Provenance.ENHANCED)


def _lexeme_token(text: str) -> Token:
    return Token(kind=TokenKind.COMMAND if text.startswith("\\") else TokenKind.SYMBOL, text=text)



# ============================================================================
# Text mixing
# ============================================================================

def _text_group(words: Sequence[str]) -> str:
    return "\\text{" + " ".join(words) + "}"


def inject_text(
    formula: LatexFormula,
    lexicon: Sequence[str],
    rng: np.random.Generator,
    position: Optional[str] = None,
    words: Optional[Sequence[str]] = None,
) -> LatexFormula:
    """Insert a \\text{...} group of lexicon words at a top-level position.

    Args:
        formula: validate-ok, non-Table formula
        lexicon: Words (or short phrases) to draw from, with replacement
        rng: Generator
        position: "prefix", "suffix" or "between"; drawn when None
        words: Explicit words, bypassing the draw

    Returns:
        Enhanced formula

    Raises:
        EnhanceError: On an empty lexicon, a Table formula or an unusable position
    """
    if not lexicon and not words:
        raise EnhanceError("lexicon is empty")
    if formula.category == Category.TABLE:
        raise EnhanceError("text is never injected into tables")
    _require_valid([formula])

    if words is None:
        count = int(rng.integers(1, MAX_INJECTED_WORDS + 1))
        words = [_pick(rng, lexicon) for _ in range(count)]
    clean = [word for word in (_sanitize_word(w) for w in words) if word]
    if not clean:
        raise EnhanceError("no usable words to inject")
    group = _text_group(clean)
    source = normalize_whitespace(formula.source)

    between = [sep for sep in HCAT_SEPARATORS if f" {sep} " in source]
    positions = ["prefix", "suffix"] + (["between"] if between else [])
    if position is None:
        position = _pick(rng, positions)
    if position not in positions:
        raise EnhanceError(f"position {position!r} not available for this formula")

    if position == "prefix":
        result = f"{group}\\; {source}"
    elif position == "suffix":
        result = f"{source} \\;{group}"
    else:
        separator = _pick(rng, between)
        marker = f" {separator} "
        occurrences = [m.start() for m in re.finditer(re.escape(marker), source)]
        at = occurrences[int(rng.integers(len(occurrences)))] + len(marker)
        result = f"{source[:at]}{group}\\; {source[at:]}"
    return make_formula(result, Provenance.ENHANCED)


def replace_text(formula: LatexFormula, lexicon: Sequence[str], rng: np.random.Generator) -> LatexFormula:
    """Rewrite every word inside existing text groups with lexicon words.

    Returns the input unchanged when it has no text groups.
    """
    if not lexicon:
        raise EnhanceError("lexicon is empty")
    tokens = list(formula.tokens)
    replaced = False
    for i, token in enumerate(tokens):
        if token.kind != TokenKind.TEXT:
            continue
        count = len(token.text.split())
        new_words = [_sanitize_word(_pick(rng, lexicon)) or "x" for _ in range(count)]
        tokens[i] = Token(kind=TokenKind.TEXT, text=" ".join(new_words))
        replaced = True
    if not replaced:
        return formula
    return make_formula("".join(token.text for token in tokens), Provenance.ENHANCED)


# ============================================================================
# Short formulas
# ============================================================================

def _base_symbol(rng: np.random.Generator) -> str:
    return _pick(rng, GREEK_LETTERS) if rng.random() < 0.6 else _pick(rng, LATIN_LETTERS)


def gen_short_formula(rng: np.random.Generator) -> LatexFormula:
    """Generate a short symbol formula (at most four tokens, category Symbol).

    Shapes: a bare symbol, an accented symbol, a symbol with one sub- or
    superscript, a primed symbol, or a symbol applied to one argument.
    """
    shape = int(rng.integers(5))
    base = _base_symbol(rng)
    if shape == 0:
        source = base
    elif shape == 1:
        source = f"{_pick(rng, ACCENTS)}{{{base}}}"
    elif shape == 2:
        if rng.random() < 0.5:
            source = f"{base}_{_pick(rng, SUBSCRIPTS)}"
        else:
            source = f"{base}^{_pick(rng, SUPERSCRIPTS)}"
    elif shape == 3:
        source = f"{base}'"
    else:
        source = f"{base}({_pick(rng, LATIN_LETTERS[:26])})"
    formula = make_formula(source, Provenance.GENERATED)
    if formula.category != Category.SYMBOL:
        return make_formula(base, Provenance.GENERATED)
    return formula


# ============================================================================
# Orchestration
# ============================================================================

class Enhancer:
    """Applies the configured enhancement chain to unit formulas."""

    def __init__(self, config: EnhanceConfig, snippets: Optional[Sequence[str]] = None):
        """Initialize the enhancer.

        Args:
            config: Enhancement configuration
            snippets: Optional prose snippets harvested from the corpus
        """
        self.config = config
        self.lexicons: Dict[str, List[str]] = {"english": list(BUILTIN_ENGLISH)}
        for name, path in config.lexicons.items():
            self.lexicons[name] = load_lexicon(path)
            logger.info(f"Loaded lexicon '{name}' with {len(self.lexicons[name])} word(s)")
        if snippets:
            self.lexicons["prose"] = [s for s in (_sanitize_word(x) for x in snippets) if s]
        self.lexicons = {name: words for name, words in self.lexicons.items() if words}

    def enhance(self, unit: LatexFormula, pool: Sequence[LatexFormula], rng: np.random.Generator) -> LatexFormula:
        """Run concatenation, substitution and text mixing with the configured probabilities.

        Table units are returned untouched.

        Args:
            unit: Base unit
            pool: Units available as concatenation partners
            rng: Per-item generator

        Returns:
            The enhanced (or unchanged) formula
        """
        cfg = self.config
        if unit.category == Category.TABLE:
            return unit

        formula = unit
        if cfg.max_units_per_formula >= 2 and len(pool) > 1:
            roll = rng.random()
            if roll < cfg.p_hcat:
                formula = self._try_concat(formula, pool, rng, horizontal=True)
            elif roll < cfg.p_hcat + cfg.p_vcat:
                formula = self._try_concat(formula, pool, rng, horizontal=False)

        formula = substitute(formula, cfg.substitution, cfg.p_subst, rng)

        if self.lexicons and rng.random() < cfg.p_text_inject:
            lexicon = self.lexicons[_pick(rng, sorted(self.lexicons))]
            formula = inject_text(formula, lexicon, rng)
        if self.lexicons and cfg.p_text_replace and rng.random() < cfg.p_text_replace:
            lexicon = self.lexicons[_pick(rng, sorted(self.lexicons))]
            formula = replace_text(formula, lexicon, rng)
        return formula

    def _try_concat(
        self,
        formula: LatexFormula,
        pool: Sequence[LatexFormula],
        rng: np.random.Generator,
        horizontal: bool,
    ) -> LatexFormula:
        count = int(rng.integers(2, self.config.max_units_per_formula + 1))
        blocked = (Category.MULTI_LINE, Category.TABLE) if horizontal else (Category.TABLE,)
        if formula.category in blocked:
            return formula
        partners = []
        for _ in range(count - 1):
            partner = pool[int(rng.integers(len(pool)))]
            if partner.category not in blocked:
                partners.append(partner)
        if not partners:
            return formula
        units = [formula] + partners
        if horizontal:
            return concat_horizontal(units, rng, max_units=self.config.max_units_per_formula)
        return concat_vertical(units, rng)
