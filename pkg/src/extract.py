"""Extract unit formulas and prose snippets from converter-produced Markdown."""

import logging
import math
import re
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Tuple, Union

from pydantic import BaseModel, Field

from src.latex_core import make_formula, validate
from src.logs import JsonlWriter, StageLogger
from src.schemas import (
    Category,
    ExtractedUnit,
    ExtractionDrop,
    MarkdownDoc,
    Provenance,
    UnitKind,
)

logger = logging.getLogger(__name__)

MARKDOWN_SUFFIXES = (".md", ".mmd")
MAX_UNIT_CHARS = 2000
MAX_DOLLAR_CHARS = 200

# Bare environments recognized outside fences, and what their body becomes.
BARE_ENVIRONMENTS = {
    "equation": None,
    "equation*": None,
    "align": "aligned",
    "align*": "aligned",
    "gather": "gathered",
    "gather*": "gathered",
}

_BLANK_LINE = re.compile(r"\n[ \t]*\n")
_BARE_BEGIN = re.compile(r"\\begin\{(equation\*?|align\*?|gather\*?)\}")
_CODE_FENCE = re.compile(r"^```.*?^```[^\n]*$", re.MULTILINE | re.DOTALL)
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
_SAFE_WORD = re.compile(r"[A-Za-z0-9][A-Za-z0-9',.;:!?()\-]*")


class ExtractionStats(BaseModel):
    """Counts from one extraction run."""

    documents: int = Field(0, ge=0, description="Documents scanned")
    units: int = Field(0, ge=0, description="Units extracted")
    dropped: dict = Field(default_factory=dict, description="Dropped regions per reason")


class _Region(BaseModel):
    start: int
    end: int
    body: str
    kind: UnitKind
    wrapper: Optional[str] = None
    reject: Optional[str] = None


def load_documents(corpus_dir: Union[str, Path]) -> List[MarkdownDoc]:
    """Load every .md/.mmd file under a directory in sorted path order.

    Args:
        corpus_dir: Corpus root (a single file is also accepted)

    Returns:
        Documents with ids relative to the corpus root
    """
    root = Path(corpus_dir)
    if root.is_file():
        paths = [root]
        base = root.parent
    else:
        paths = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in MARKDOWN_SUFFIXES)
        base = root

    documents = []
    for path in paths:
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            logger.warning(f"Error loading file {path}: {e}")
            continue
        documents.append(MarkdownDoc(path=path, text=text, doc_id=path.relative_to(base).as_posix()))
    return documents


def _code_spans(text: str) -> List[Tuple[int, int]]:
    return [(m.start(), m.end()) for m in _CODE_FENCE.finditer(text)]


def _find_unescaped(text: str, needle: str, start: int) -> int:
    i = text.find(needle, start)
    while i != -1 and i > 0 and text[i - 1] == "\\":
        i = text.find(needle, i + 1)
    return i


def _scan_regions(text: str) -> Iterator[_Region]:
    """Yield fenced math regions (accepted or rejected) in document order."""
    code = _code_spans(text)
    code_index = 0
    i = 0
    n = len(text)
    while i < n:
        while code_index < len(code) and code[code_index][1] <= i:
            code_index += 1
        if code_index < len(code) and code[code_index][0] <= i < code[code_index][1]:
            i = code[code_index][1]
            continue

        char = text[i]
        if char == "\\" and i + 1 < n:
            nxt = text[i + 1]
            if nxt in "([":
                closing = "\\)" if nxt == "(" else "\\]"
                kind = UnitKind.INLINE if nxt == "(" else UnitKind.DISPLAY
                end = text.find(closing, i + 2)
                if end == -1:
                    yield _Region(start=i, end=i + 2, body="", kind=kind, reject="Unterminated")
                    i += 2
                    continue
                yield _Region(start=i, end=end + 2, body=text[i + 2:end], kind=kind)
                i = end + 2
                continue
            if text.startswith("\\begin{", i):
                match = _BARE_BEGIN.match(text, i)
                if match:
                    name = match.group(1)
                    closing = f"\\end{{{name}}}"
                    end = text.find(closing, match.end())
                    if end == -1:
                        yield _Region(start=i, end=match.end(), body="", kind=UnitKind.DISPLAY, reject="Unterminated")
                        i = match.end()
                        continue
                    yield _Region(
                        start=i,
                        end=end + len(closing),
                        body=text[match.end():end],
                        kind=UnitKind.DISPLAY,
                        wrapper=BARE_ENVIRONMENTS[name],
                    )
                    i = end + len(closing)
                    continue
            # Escaped character such as \$ is literal text.
            i += 2
            continue

        if char == "$":
            if text.startswith("$$", i):
                end = _find_unescaped(text, "$$", i + 2)
                if end == -1:
                    yield _Region(start=i, end=i + 2, body="", kind=UnitKind.DISPLAY, reject="Unterminated")
                    i += 2
                    continue
                yield _Region(start=i, end=end + 2, body=text[i + 2:end], kind=UnitKind.DISPLAY)
                i = end + 2
                continue
            end = _find_unescaped(text, "$", i + 1)
            if end == -1:
                yield _Region(start=i, end=i + 1, body="", kind=UnitKind.INLINE, reject="Unterminated")
                i += 1
                continue
            body = text[i + 1:end]
            if not body.strip() or len(body) > MAX_DOLLAR_CHARS or _BLANK_LINE.search(body):
                yield _Region(start=i, end=i + 1, body="", kind=UnitKind.INLINE, reject="DollarRejected")
                i += 1
                continue
            yield _Region(start=i, end=end + 1, body=body, kind=UnitKind.INLINE)
            i = end + 1
            continue
        i += 1


def _unit_source(region: _Region) -> str:
    body = region.body.strip()
    if region.wrapper and body:
        return f"\\begin{{{region.wrapper}}} {body} \\end{{{region.wrapper}}}"
    return body


def extract_units(doc: MarkdownDoc, drops: Optional[List[ExtractionDrop]] = None) -> List[ExtractedUnit]:
    """Pull validated unit formulas out of one Markdown document.

    Recognizes \\( \\), \\[ \\], $...$, $$...$$ and bare equation/align/gather
    environments. Regions that are malformed, too long, empty or fail
    `validate` are skipped; each skip is appended to `drops` when given.

    Args:
        doc: Markdown document
        drops: Optional list collecting dropped regions

    Returns:
        Units in document order
    """
    units: List[ExtractedUnit] = []

    def drop(region: _Region, reason: str) -> None:
        logger.debug(f"Dropped region {region.start}-{region.end} in {doc.doc_id}: {reason}")
        if drops is not None:
            drops.append(ExtractionDrop(doc_id=doc.doc_id, span=(region.start, region.end), reason=reason))

    for region in _scan_regions(doc.text):
        if region.reject:
            drop(region, region.reject)
            continue
        source = _unit_source(region)
        if not source:
            drop(region, "Empty")
            continue
        if len(source) > MAX_UNIT_CHARS:
            drop(region, "TooLong")
            continue
        formula = make_formula(source, Provenance.EXTRACTED)
        error = validate(formula.tokens)
        if error is not None:
            drop(region, f"Invalid:{error.kind.value}")
            continue
        if formula.category == Category.TABLE and region.kind == UnitKind.INLINE:
            drop(region, "InlineTable")
            continue
        units.append(ExtractedUnit(
            formula=formula,
            kind=region.kind,
            doc_id=doc.doc_id,
            char_span=(region.start, region.end),
        ))
    return units


def extract_corpus(
    docs: Iterable[MarkdownDoc],
    drop_log: Optional[JsonlWriter] = None,
) -> Tuple[List[ExtractedUnit], ExtractionStats]:
    """Extract units from every document, logging drops as JSON Lines.

    Args:
        docs: Documents to scan
        drop_log: Optional writer receiving one line per dropped region

    Returns:
        All units in corpus order, plus counts
    """
    stats = ExtractionStats()
    units: List[ExtractedUnit] = []
    for doc in docs:
        drops: List[ExtractionDrop] = []
        doc_units = extract_units(doc, drops)
        units.extend(doc_units)
        stats.documents += 1
        stats.units += len(doc_units)
        for item in drops:
            stats.dropped[item.reason] = stats.dropped.get(item.reason, 0) + 1
            if drop_log is not None:
                drop_log.write(item)
    StageLogger.log("extract", f"{stats.documents} document(s)", f"{stats.units} unit(s), dropped {stats.dropped}")
    return units, stats


def _prose(text: str) -> str:
    """Document text with math regions and code blocks blanked out."""
    pieces = []
    cursor = 0
    regions = sorted(
        [(r.start, r.end) for r in _scan_regions(text)] + _code_spans(text)
    )
    for start, end in regions:
        if start < cursor:
            continue
        pieces.append(text[cursor:start])
        pieces.append(" \n\n ")
        cursor = end
    pieces.append(text[cursor:])
    return "".join(pieces)


def _balanced_chunks(words: List[str], max_words: int) -> List[List[str]]:
    count = math.ceil(len(words) / max_words)
    base, extra = divmod(len(words), count)
    chunks = []
    start = 0
    for index in range(count):
        size = base + (1 if index < extra else 0)
        chunks.append(words[start:start + size])
        start += size
    return chunks


def harvest_text_snippets(doc: MarkdownDoc, min_words: int, max_words: int) -> List[str]:
    """Split the plain prose of a document into word-count-bounded snippets.

    Math regions and code blocks are removed, the rest is split into
    paragraphs and sentences, and each sentence is cut into the fewest
    near-equal chunks of at most `max_words` words. Chunks shorter than
    `min_words` are discarded. Only words safe inside a `\\text{}` group
    are kept.

    Args:
        doc: Markdown document
        min_words: Minimum snippet length in words
        max_words: Maximum snippet length in words

    Returns:
        Snippets in document order
    """
    if not 1 <= min_words <= max_words:
        raise ValueError("require 1 <= min_words <= max_words")

    snippets: List[str] = []
    for paragraph in re.split(r"\n\s*\n", _prose(doc.text)):
        paragraph = paragraph.strip()
        if not paragraph or paragraph.startswith(("#", "|", "!", ">")):
            continue
        for sentence in _SENTENCE_END.split(" ".join(paragraph.split())):
            words = [word for word in sentence.split() if _SAFE_WORD.fullmatch(word)]
            if len(words) < min_words:
                continue
            for chunk in _balanced_chunks(words, max_words):
                if len(chunk) >= min_words:
                    snippets.append(" ".join(chunk))
    return snippets
