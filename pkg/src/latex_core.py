"""Tokenize, validate, normalize and classify LaTeX formula strings."""

import re
from typing import Iterable, List, Optional, Sequence, Tuple

from src.schemas import (
    Category,
    FormulaSyntaxError,
    LatexFormula,
    Provenance,
    SyntaxErrorKind,
    Token,
    TokenKind,
)


TEXT_COMMANDS = frozenset({
    "\\text", "\\mbox", "\\textrm", "\\textbf", "\\textit", "\\texttt",
    "\\textsf", "\\textup", "\\textnormal", "\\hbox",
})

# Commands that need this many following arguments.
COMMAND_ARITY = {
    "\\frac": 2, "\\dfrac": 2, "\\tfrac": 2, "\\binom": 2, "\\dbinom": 2, "\\tbinom": 2,
    "\\overset": 2, "\\underset": 2, "\\stackrel": 2,
    "\\sqrt": 1, "\\hat": 1, "\\widehat": 1, "\\tilde": 1, "\\widetilde": 1, "\\bar": 1,
    "\\vec": 1, "\\dot": 1, "\\ddot": 1, "\\check": 1, "\\breve": 1, "\\acute": 1, "\\grave": 1,
    "\\overline": 1, "\\underline": 1, "\\overbrace": 1, "\\underbrace": 1,
    "\\overrightarrow": 1, "\\overleftarrow": 1,
    "\\mathbf": 1, "\\mathit": 1, "\\mathrm": 1, "\\mathsf": 1, "\\mathtt": 1, "\\mathcal": 1,
    "\\mathbb": 1, "\\mathfrak": 1, "\\mathscr": 1, "\\boldsymbol": 1, "\\bm": 1,
    "\\operatorname": 1, "\\left": 1, "\\right": 1, "\\middle": 1,
    "^": 1, "_": 1,
}
COMMAND_ARITY.update({command: 1 for command in TEXT_COMMANDS})

RELATION_OPERATORS = frozenset({
    "+", "-", "=", "<", ">", "/", "*", "\\pm", "\\mp", "\\times", "\\cdot", "\\div", "\\ast",
    "\\le", "\\leq", "\\ge", "\\geq", "\\ne", "\\neq", "\\approx", "\\equiv", "\\sim", "\\simeq",
    "\\cong", "\\propto", "\\in", "\\notin", "\\subset", "\\subseteq", "\\supset", "\\supseteq",
    "\\cup", "\\cap", "\\wedge", "\\vee", "\\to", "\\rightarrow", "\\leftarrow", "\\Rightarrow",
    "\\Leftarrow", "\\Leftrightarrow", "\\iff", "\\mapsto", "\\prec", "\\succ", "\\preceq",
    "\\succeq", "\\ll", "\\gg", "\\oplus", "\\otimes", "\\circ", "\\setminus", "\\mid",
    "\\sum", "\\prod", "\\int", "\\oint", "\\lim",
})

TABLE_ENVIRONMENTS = frozenset({"tabular", "tabular*", "tabularx"})
MATRIX_ENVIRONMENTS = frozenset({
    "matrix", "pmatrix", "bmatrix", "Bmatrix", "vmatrix", "Vmatrix", "smallmatrix", "cases",
})
MULTILINE_ENVIRONMENTS = frozenset({
    "aligned", "align", "align*", "gathered", "gather", "gather*", "split",
    "multline", "multline*", "alignedat", "eqnarray", "eqnarray*",
})

# Wrappers unwrapped to their argument.
STYLE_WRAPPERS = frozenset({"\\mathbf", "\\boldsymbol", "\\mathit", "\\bm"})
# Switches and spacing removed outright.
STYLE_SWITCHES = frozenset({
    "\\bf", "\\it", "\\displaystyle", "\\!", "\\,", "\\;", "\\quad", "\\qquad",
})

MAX_NGRAM = 8

_WHITESPACE_RUN = re.compile(r"\s+")
_ENV_NAME = re.compile(r"\s*\{([A-Za-z]+\*?)\}")
_ENV_LEXEME = re.compile(r"\\(?:begin|end)\s*\{([A-Za-z]+\*?)\}")


def normalize_whitespace(source: str) -> str:
    """Collapse whitespace runs to one space and strip the ends."""
    return _WHITESPACE_RUN.sub(" ", source).strip()


# ============================================================================
# Tokenizer
# ============================================================================

def _scan_text_group(source: str, start: int) -> Tuple[str, int, bool]:
    """Scan the body of a text-mode group starting just after '{'.

    Returns:
        (body, index after the closing brace or end of input, closed)
    """
    depth = 1
    i = start
    while i < len(source):
        char = source[i]
        if char == "\\" and i + 1 < len(source):
            i += 2
            continue
        if char == "{":
            depth += 1
        elif char == "}":
            depth -= 1
            if depth == 0:
                return source[start:i], i + 1, True
        i += 1
    return source[start:], len(source), False


def tokenize(source: str) -> List[Token]:
    """Split a LaTeX string into a flat token sequence.

    Commands greedily consume letter runs; `\\begin{name}` and `\\end{name}`
    become single environment tokens; the argument of text commands becomes
    one Text token. Unknown characters are Symbol tokens, so this never fails.

    Args:
        source: LaTeX source

    Returns:
        Token list whose lexemes concatenate back to the source with
        whitespace runs collapsed to single spaces
    """
    tokens: List[Token] = []
    i = 0
    n = len(source)
    while i < n:
        char = source[i]
        if char.isspace():
            j = i
            while j < n and source[j].isspace():
                j += 1
            tokens.append(Token(kind=TokenKind.WHITESPACE, text=" "))
            i = j
        elif char == "\\":
            if i + 1 >= n:
                tokens.append(Token(kind=TokenKind.COMMAND, text="\\"))
                i += 1
            elif source[i + 1].isalpha() and source[i + 1].isascii():
                j = i + 1
                while j < n and source[j].isascii() and source[j].isalpha():
                    j += 1
                name = source[i:j]
                if name in ("\\begin", "\\end"):
                    match = _ENV_NAME.match(source, j)
                    if match:
                        kind = TokenKind.ENV_BEGIN if name == "\\begin" else TokenKind.ENV_END
                        tokens.append(Token(kind=kind, text=name + _WHITESPACE_RUN.sub(" ", source[j:match.end()])))
                        i = match.end()
                        continue
                tokens.append(Token(kind=TokenKind.COMMAND, text=name))
                i = j
                if name in TEXT_COMMANDS and i < n and source[i] == "{":
                    body, i, closed = _scan_text_group(source, i + 1)
                    tokens.append(Token(kind=TokenKind.GROUP_OPEN, text="{"))
                    if body:
                        tokens.append(Token(kind=TokenKind.TEXT, text=_WHITESPACE_RUN.sub(" ", body)))
                    if closed:
                        tokens.append(Token(kind=TokenKind.GROUP_CLOSE, text="}"))
            elif source[i + 1] == "\\":
                tokens.append(Token(kind=TokenKind.LINE_BREAK, text="\\\\"))
                i += 2
            elif source[i + 1].isspace():
                # Control space swallows the whole run.
                j = i + 1
                while j < n and source[j].isspace():
                    j += 1
                tokens.append(Token(kind=TokenKind.COMMAND, text="\\ "))
                i = j
            else:
                tokens.append(Token(kind=TokenKind.COMMAND, text=source[i:i + 2]))
                i += 2
        elif char == "{":
            tokens.append(Token(kind=TokenKind.GROUP_OPEN, text="{"))
            i += 1
        elif char == "}":
            tokens.append(Token(kind=TokenKind.GROUP_CLOSE, text="}"))
            i += 1
        elif char == "&":
            tokens.append(Token(kind=TokenKind.ALIGNMENT, text="&"))
            i += 1
        else:
            tokens.append(Token(kind=TokenKind.SYMBOL, text=char))
            i += 1
    return tokens


def detokenize(tokens: Iterable[Token]) -> str:
    """Concatenate token lexemes."""
    return "".join(token.text for token in tokens)


def join_lexemes(tokens: Sequence[Token]) -> str:
    """Concatenate lexemes, inserting a space where a letter command would swallow a letter."""
    parts: List[str] = []
    previous = ""
    for token in tokens:
        text = token.text
        if _needs_separator(previous, text):
            parts.append(" ")
        parts.append(text)
        previous = text
    return "".join(parts)


def _needs_separator(previous: str, following: str) -> bool:
    if not previous or not following:
        return False
    letter_command = previous.startswith("\\") and len(previous) > 1 and previous[-1].isalpha()
    return letter_command and following[0].isascii() and following[0].isalpha()


def content_tokens(tokens: Iterable[Token]) -> List[Token]:
    """Tokens without whitespace."""
    return [token for token in tokens if token.kind != TokenKind.WHITESPACE]


def command_tokens(tokens: Iterable[Token]) -> List[str]:
    """Command-level lexeme sequence used for expression-match comparisons."""
    return [token.text for token in tokens if token.kind != TokenKind.WHITESPACE]


def env_name(token: Token) -> Optional[str]:
    """Environment name of an EnvBegin/EnvEnd token."""
    if token.kind not in (TokenKind.ENV_BEGIN, TokenKind.ENV_END):
        return None
    match = _ENV_LEXEME.fullmatch(token.text)
    return match.group(1) if match else None


# ============================================================================
# Validation
# ============================================================================

_ARGUMENT_TERMINATORS = frozenset({
    TokenKind.GROUP_CLOSE, TokenKind.ALIGNMENT, TokenKind.LINE_BREAK, TokenKind.ENV_END,
})


def _next_content(tokens: Sequence[Token], start: int) -> int:
    i = start
    while i < len(tokens) and tokens[i].kind == TokenKind.WHITESPACE:
        i += 1
    return i


def _skip_group(tokens: Sequence[Token], start: int) -> Optional[int]:
    """Index after the group opened at `start`, or None when it never closes."""
    depth = 0
    for i in range(start, len(tokens)):
        if tokens[i].kind == TokenKind.GROUP_OPEN:
            depth += 1
        elif tokens[i].kind == TokenKind.GROUP_CLOSE:
            depth -= 1
            if depth == 0:
                return i + 1
    return None


def _has_arguments(tokens: Sequence[Token], index: int, arity: int) -> bool:
    i = index + 1
    for _ in range(arity):
        i = _next_content(tokens, i)
        if i >= len(tokens) or tokens[i].kind in _ARGUMENT_TERMINATORS:
            return False
        if tokens[i].kind == TokenKind.GROUP_OPEN:
            end = _skip_group(tokens, i)
            if end is None:
                # Unclosed group: reported as UnbalancedBraces at the group.
                return True
            i = end
        elif tokens[i].text in ("\\left", "\\right", "^", "_") and tokens[index].text not in ("\\left", "\\right"):
            return False
        else:
            i += 1
    return True


def validate(tokens: Sequence[Token]) -> Optional[FormulaSyntaxError]:
    """Statically check a token sequence before rendering.

    Checks balanced groups and \\left/\\right pairs, matching \\begin/\\end
    names, and that argument-taking commands receive their arguments.

    Args:
        tokens: Token sequence from `tokenize`

    Returns:
        None when the sequence is acceptable, otherwise the first error in token order
    """
    if not content_tokens(tokens):
        return FormulaSyntaxError(kind=SyntaxErrorKind.EMPTY_INPUT, position=0)

    # Stack entries: (opener kind, environment name, token index)
    stack: List[Tuple[str, str, int]] = []
    for i, token in enumerate(tokens):
        kind = token.kind
        if kind == TokenKind.GROUP_OPEN:
            stack.append(("group", "", i))
        elif kind == TokenKind.GROUP_CLOSE:
            if not stack or stack[-1][0] != "group":
                return FormulaSyntaxError(kind=SyntaxErrorKind.UNBALANCED_BRACES, position=i)
            stack.pop()
        elif kind == TokenKind.ENV_BEGIN:
            stack.append(("env", env_name(token) or "", i))
        elif kind == TokenKind.ENV_END:
            if not stack or stack[-1][0] != "env" or stack[-1][1] != env_name(token):
                return FormulaSyntaxError(kind=SyntaxErrorKind.ENVIRONMENT_MISMATCH, position=i)
            stack.pop()
        elif kind == TokenKind.COMMAND or kind == TokenKind.SYMBOL:
            text = token.text
            if text in ("\\begin", "\\end"):
                return FormulaSyntaxError(kind=SyntaxErrorKind.ENVIRONMENT_MISMATCH, position=i)
            if text == "\\":
                return FormulaSyntaxError(kind=SyntaxErrorKind.DANGLING_COMMAND, position=i)
            arity = COMMAND_ARITY.get(text)
            if arity and not _has_arguments(tokens, i, arity):
                return FormulaSyntaxError(kind=SyntaxErrorKind.DANGLING_COMMAND, position=i)
            if text == "\\left":
                stack.append(("left", "", i))
            elif text == "\\right":
                if not stack or stack[-1][0] != "left":
                    return FormulaSyntaxError(kind=SyntaxErrorKind.UNBALANCED_BRACES, position=i)
                stack.pop()

    if stack:
        opener, _, position = stack[0]
        kind = SyntaxErrorKind.ENVIRONMENT_MISMATCH if opener == "env" else SyntaxErrorKind.UNBALANCED_BRACES
        return FormulaSyntaxError(kind=kind, position=position)
    return None


def is_valid(source: str) -> bool:
    """Whether a source string passes `validate`."""
    return validate(tokenize(source)) is None


# ============================================================================
# Classification
# ============================================================================

def _environments(tokens: Sequence[Token]) -> List[str]:
    return [env_name(token) or "" for token in tokens if token.kind == TokenKind.ENV_BEGIN]


def _array_blocks(tokens: Sequence[Token]) -> List[Tuple[bool, bool]]:
    """(has_hline, has_line_break) for each array environment."""
    blocks: List[Tuple[bool, bool]] = []
    depth_stack: List[List[bool]] = []
    for token in tokens:
        name = env_name(token)
        if token.kind == TokenKind.ENV_BEGIN and name == "array":
            depth_stack.append([False, False])
        elif token.kind == TokenKind.ENV_END and name == "array" and depth_stack:
            hline, line_break = depth_stack.pop()
            blocks.append((hline, line_break))
        elif depth_stack:
            if token.text == "\\hline":
                depth_stack[-1][0] = True
            elif token.kind == TokenKind.LINE_BREAK:
                depth_stack[-1][1] = True
    return blocks


def _has_top_level_break(tokens: Sequence[Token]) -> bool:
    depth = 0
    for token in tokens:
        if token.kind == TokenKind.ENV_BEGIN:
            depth += 1
        elif token.kind == TokenKind.ENV_END:
            depth -= 1
        elif token.kind == TokenKind.LINE_BREAK and depth == 0:
            return True
    return False


def _has_prose(tokens: Sequence[Token]) -> bool:
    for token in tokens:
        if token.kind == TokenKind.TEXT:
            words = [word for word in token.text.split() if word.isalpha()]
            if len(words) >= 2:
                return True
    return False


def classify(tokens: Sequence[Token]) -> Category:
    """Assign exactly one taxonomy category.

    Rules are checked in priority order Table > Matrix > MultiLine >
    TextHybrid > Symbol > SingleLine; the first matching rule wins.
    """
    environments = set(_environments(tokens))
    arrays = _array_blocks(tokens)

    if environments & TABLE_ENVIRONMENTS or any(hline for hline, _ in arrays):
        return Category.TABLE
    if environments & MATRIX_ENVIRONMENTS or any(line_break for _, line_break in arrays):
        return Category.MATRIX
    if _has_top_level_break(tokens) or environments & MULTILINE_ENVIRONMENTS:
        return Category.MULTI_LINE
    if _has_prose(tokens):
        return Category.TEXT_HYBRID
    content = content_tokens(tokens)
    if len(content) <= 4 and not any(token.text in RELATION_OPERATORS for token in content):
        return Category.SYMBOL
    return Category.SINGLE_LINE


def make_formula(source: str, provenance: Provenance = Provenance.EXTRACTED) -> LatexFormula:
    """Build a LatexFormula with tokens, category and lengths filled in."""
    tokens = tokenize(source)
    return LatexFormula(
        source=source,
        tokens=tokens,
        category=classify(tokens),
        char_length=len(normalize_whitespace(source)),
        token_length=len(content_tokens(tokens)),
        provenance=provenance,
    )


# ============================================================================
# Style normalization
# ============================================================================

def _group_end(tokens: Sequence[Token], start: int) -> int:
    end = _skip_group(tokens, start)
    return end if end is not None else len(tokens)


def _strip_styles(tokens: Sequence[Token]) -> List[Token]:
    out: List[Token] = []
    i = 0
    while i < len(tokens):
        token = tokens[i]
        text = token.text
        if token.kind == TokenKind.COMMAND and text in STYLE_SWITCHES:
            i += 1
            continue
        if token.kind == TokenKind.COMMAND and (text in STYLE_WRAPPERS or text == "\\mathrm"):
            j = _next_content(tokens, i + 1)
            if j < len(tokens) and tokens[j].kind == TokenKind.GROUP_OPEN:
                end = _group_end(tokens, j)
                stripped = _strip_styles(tokens[j + 1:end - 1])
                inner = content_tokens(stripped)
                single_letter = len(inner) == 1 and len(inner[0].text) == 1 and inner[0].text.isalpha()
                if text == "\\mathrm" and not single_letter:
                    out.append(token)
                    out.append(tokens[j])
                    out.extend(stripped)
                    out.append(Token(kind=TokenKind.GROUP_CLOSE, text="}"))
                elif len(inner) == 1:
                    out.extend(inner)
                else:
                    out.append(tokens[j])
                    out.extend(stripped)
                    out.append(Token(kind=TokenKind.GROUP_CLOSE, text="}"))
                i = end
                continue
            if j < len(tokens) and text != "\\mathrm" and tokens[j].kind in (TokenKind.SYMBOL, TokenKind.COMMAND):
                # Unbraced argument, e.g. \mathbf x
                i = j
                continue
        out.append(token)
        i += 1
    return out


def _tidy_whitespace(tokens: Sequence[Token]) -> List[Token]:
    out: List[Token] = []
    for token in tokens:
        if token.kind == TokenKind.WHITESPACE:
            if not out or out[-1].kind in (TokenKind.WHITESPACE, TokenKind.GROUP_OPEN):
                continue
        elif token.kind == TokenKind.GROUP_CLOSE and out and out[-1].kind == TokenKind.WHITESPACE:
            out.pop()
        out.append(token)
    while out and out[-1].kind == TokenKind.WHITESPACE:
        out.pop()

    # Keep letter commands from swallowing a following letter.
    separated: List[Token] = []
    for token in out:
        if separated and _needs_separator(separated[-1].text, token.text):
            separated.append(Token(kind=TokenKind.WHITESPACE, text=" "))
        separated.append(token)
    return separated


def normalize_style(tokens: Sequence[Token]) -> List[Token]:
    """Remove bold/italic/display wrappers and spacing commands.

    `\\mathbf`, `\\boldsymbol`, `\\mathit` and `\\bm` are unwrapped to their
    argument (braces kept when the argument has several tokens), `\\mathrm`
    is unwrapped only around a single letter, and `\\bf`, `\\it`,
    `\\displaystyle`, `\\!`, `\\,`, `\\;`, `\\quad`, `\\qquad` are dropped.
    A formula made only of removable commands is returned unchanged. The
    result is a fixed point: normalizing it again changes nothing.
    """
    normalized = _tidy_whitespace(_strip_styles(tokens))
    if not content_tokens(normalized):
        return list(tokens)
    return normalized


# ============================================================================
# Repetition
# ============================================================================

def detect_repetition(tokens: Sequence[Token], max_repeats: int) -> bool:
    """Whether some token n-gram (n <= 8) repeats back-to-back more than `max_repeats` times."""
    if max_repeats < 2:
        raise ValueError("max_repeats must be at least 2")
    lexemes = command_tokens(tokens)
    length = len(lexemes)
    for n in range(1, MAX_NGRAM + 1):
        if n * (max_repeats + 1) > length:
            break
        i = 0
        while i + n <= length:
            gram = lexemes[i:i + n]
            count = 1
            j = i + n
            while j + n <= length and lexemes[j:j + n] == gram:
                count += 1
                j += n
            if count > max_repeats:
                return True
            i += 1
    return False
