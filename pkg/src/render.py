"""Render LaTeX formulas to grayscale images through a pluggable external command."""

import hashlib
import json
import logging
import os
import re
import shlex
import shutil
import subprocess
import sys
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import ValidationError
from tqdm import tqdm

from src.config import RendererSettings
from src.latex_core import tokenize, validate
from src.logs import StageLogger
from src.schemas import (
    ConfigError,
    GrayImage,
    RenderFailure,
    RenderFailureKind,
    RendererUnavailable,
    RenderOutcome,
    RenderSpec,
)

logger = logging.getLogger(__name__)

INK_THRESHOLD = 128
TEX_NAME = "formula.tex"
PNG_NAME = "formula.png"

DOCUMENT_TEMPLATE = r"""\documentclass[12pt]{article}
\usepackage{amsmath,amssymb}
%(preamble)s
\usepackage[active,tightpage]{preview}
\pagestyle{empty}
\begin{document}
\begin{preview}
$\displaystyle %(latex)s$
\end{preview}
\end{document}
"""

_CJK = re.compile(r"[぀-ヿ㐀-䶿一-鿿가-힯＀-￯]")


def has_cjk(text: str) -> bool:
    """Whether text contains Chinese, Japanese or Korean characters."""
    return bool(_CJK.search(text))


def ink_bbox(img: GrayImage, threshold: int = INK_THRESHOLD) -> Optional[Tuple[int, int, int, int]]:
    """Bounding box of pixels strictly darker than `threshold`.

    Returns:
        (top, left, bottom, right) with exclusive bottom/right, or None for a blank image
    """
    ink = img < threshold
    rows = np.flatnonzero(ink.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(ink.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def crop_to_ink(img: GrayImage, margin: int, threshold: int = INK_THRESHOLD) -> Optional[GrayImage]:
    """Crop to the ink bounding box and pad with a white margin; None if blank."""
    box = ink_bbox(img, threshold)
    if box is None:
        return None
    top, left, bottom, right = box
    return np.pad(img[top:bottom, left:right], margin, mode="constant", constant_values=255)


def load_gray(path: Union[str, Path]) -> GrayImage:
    """Load an image as 8-bit grayscale, flattening transparency onto white."""
    with Image.open(path) as im:
        rgba = im.convert("RGBA")
    background = Image.new("RGBA", rgba.size, (255, 255, 255, 255))
    flattened = Image.alpha_composite(background, rgba).convert("L")
    return np.asarray(flattened, dtype=np.uint8).copy()


def save_gray(img: GrayImage, path: Union[str, Path]) -> None:
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8), mode="L").save(path, format="PNG")


def _failure(kind: RenderFailureKind, message: str) -> RenderOutcome:
    return RenderOutcome(failure=RenderFailure(kind=kind, message=message))


# ============================================================================
# Backends
# ============================================================================

class RenderBackend(Protocol):
    """Turns a standalone .tex document into a PNG file."""

    version: str

    def run(self, tex_path: Path, png_path: Path, dpi: int, timeout_s: float) -> int:
        """Render and return the exit status; raise subprocess.TimeoutExpired on timeout."""
        ...

    def check_available(self) -> None:
        """Raise RendererUnavailable if the backend cannot run."""
        ...


class CommandBackend:
    """Run a command template, one subprocess per '&&'-separated step.

    Placeholders: {input-file}, {output-file}, {work-dir} and {dpi}. Steps run
    without a shell inside the document's working directory.
    """

    def __init__(self, command: str, version: str = ""):
        self.command = command
        self.version = version or command
        self.steps = [step.strip() for step in command.split("&&") if step.strip()]
        if not self.steps:
            raise ConfigError("renderer.command is empty")

    def _arguments(self, step: str, tex_path: Path, png_path: Path, dpi: int) -> List[str]:
        values = {
            "{input-file}": str(tex_path),
            "{output-file}": str(png_path),
            "{work-dir}": str(tex_path.parent),
            "{dpi}": str(dpi),
        }
        arguments = []
        for argument in shlex.split(step):
            for placeholder, value in values.items():
                argument = argument.replace(placeholder, value)
            arguments.append(argument)
        return arguments

    def check_available(self) -> None:
        for step in self.steps:
            executable = shlex.split(step)[0]
            if shutil.which(executable) is None:
                raise RendererUnavailable(f"renderer executable '{executable}' not found on PATH")

    def run(self, tex_path: Path, png_path: Path, dpi: int, timeout_s: float) -> int:
        """Run every step; `timeout_s` bounds the whole command, not each step.

        Raises:
            subprocess.TimeoutExpired: Once the shared time budget is spent
        """
        deadline = time.monotonic() + timeout_s
        for step in self.steps:
            arguments = self._arguments(step, tex_path, png_path, dpi)
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise subprocess.TimeoutExpired(arguments, timeout_s)
            try:
                result = subprocess.run(
                    arguments,
                    cwd=tex_path.parent,
                    stdin=subprocess.DEVNULL,
                    stdout=subprocess.DEVNULL,
                    stderr=subprocess.PIPE,
                    timeout=remaining,
                )
            except FileNotFoundError:
                logger.warning(f"Renderer executable not found: {arguments[0]}")
                return 127
            if result.returncode != 0:
                logger.debug(f"Renderer step failed ({result.returncode}): {result.stderr[-500:]!r}")
                return result.returncode
        return 0


# ============================================================================
# Cache
# ============================================================================

class RenderCache:
    """Content-addressed render cache with a two-level hex fan-out.

    Images are stored as `<root>/ab/cd/<key>.png`, failures as `<key>.json`.
    Writes go through a temporary file and an atomic rename, so readers never
    see partial entries. Unreadable entries are treated as misses.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(spec: RenderSpec, version: str) -> str:
        payload = json.dumps([spec.latex, spec.font_id, spec.dpi, version], ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def _base(self, key: str) -> Path:
        return self.root / key[:2] / key[2:4] / key

    def get(self, key: str) -> Optional[RenderOutcome]:
        base = self._base(key)
        png_path = base.with_suffix(".png")
        json_path = base.with_suffix(".json")
        try:
            if png_path.is_file():
                image = load_gray(png_path)
                if image.size == 0 or ink_bbox(image) is None:
                    raise ValueError("cached image has no ink")
                return RenderOutcome(image=image, from_cache=True)
            if json_path.is_file():
                failure = RenderFailure.model_validate_json(json_path.read_text(encoding="utf-8"))
                return RenderOutcome(failure=failure, from_cache=True)
        except (OSError, ValueError, SyntaxError, ValidationError) as e:
            logger.warning(f"Ignoring corrupt cache entry {key}: {e}")
        return None

    def put(self, key: str, outcome: RenderOutcome) -> None:
        base = self._base(key)
        base.parent.mkdir(parents=True, exist_ok=True)
        suffix = ".png" if outcome.ok else ".json"
        handle = tempfile.NamedTemporaryFile(dir=base.parent, suffix=".tmp", delete=False)
        try:
            with handle:
                if outcome.ok:
                    Image.fromarray(outcome.image, mode="L").save(handle, format="PNG")
                else:
                    handle.write(outcome.failure.model_dump_json().encode("utf-8"))
            os.replace(handle.name, base.with_suffix(suffix))
        except OSError as e:
            logger.warning(f"Could not write cache entry {key}: {e}")
            Path(handle.name).unlink(missing_ok=True)

    def clear(self) -> None:
        shutil.rmtree(self.root, ignore_errors=True)
        self.root.mkdir(parents=True, exist_ok=True)


# ============================================================================
# Renderer
# ============================================================================

class Renderer:
    """Formula renderer with font profiles, failure accounting and caching."""

    def __init__(
        self,
        settings: Optional[RendererSettings] = None,
        backend: Optional[RenderBackend] = None,
        cache_dir: Optional[Union[str, Path]] = None,
    ):
        """Initialize the renderer.

        Args:
            settings: Renderer settings; defaults when omitted
            backend: Backend override; defaults to the configured command
            cache_dir: Directory of the render cache; no caching when omitted
        """
        self.settings = settings or RendererSettings()
        self.backend = backend or CommandBackend(self.settings.command, self.settings.version)
        self.cache = RenderCache(cache_dir) if cache_dir is not None else None
        self.invocations = 0
        self._lock = threading.Lock()

    @property
    def version(self) -> str:
        return self.settings.version or getattr(self.backend, "version", "")

    def spec(self, latex: str, font_id: Optional[str] = None, dpi: Optional[int] = None) -> RenderSpec:
        """Build a RenderSpec from the configured defaults."""
        return RenderSpec(
            latex=latex,
            font_id=font_id or next(iter(self.settings.fonts)),
            dpi=dpi or self.settings.dpi,
            timeout_ms=self.settings.timeout_ms,
        )

    def route_font(self, latex: str, font_id: str) -> str:
        """Send formulas with CJK text to the CJK font profile when one is configured."""
        if self.settings.cjk_font and has_cjk(latex):
            return self.settings.cjk_font
        return font_id

    def document(self, spec: RenderSpec) -> str:
        """Standalone document wrapping the formula in display math.

        Raises:
            ConfigError: If the font id is not configured
        """
        if spec.font_id not in self.settings.fonts:
            raise ConfigError(f"unknown font id '{spec.font_id}'")
        return DOCUMENT_TEMPLATE % {"preamble": self.settings.fonts[spec.font_id], "latex": spec.latex}

    def check_available(self) -> None:
        """Check the backend can run.

        Raises:
            RendererUnavailable: If the renderer executable is missing
        """
        check = getattr(self.backend, "check_available", None)
        if check is not None:
            check()

    def render(self, spec: RenderSpec) -> RenderOutcome:
        """Render one formula.

        Invalid LaTeX is rejected before the backend runs. A successful image
        is cropped to its ink box plus the configured white margin.

        Args:
            spec: Rendering request

        Returns:
            Image or typed failure
        """
        error = validate(tokenize(spec.latex))
        if error is not None:
            return _failure(RenderFailureKind.SYNTAX_REJECT, f"{error.kind.value} at {error.position}")
        document = self.document(spec)

        with self._lock:
            self.invocations += 1
        with tempfile.TemporaryDirectory(prefix="texforge-") as work_dir:
            tex_path = Path(work_dir) / TEX_NAME
            png_path = Path(work_dir) / PNG_NAME
            tex_path.write_text(document, encoding="utf-8")
            try:
                status = self.backend.run(tex_path, png_path, spec.dpi, spec.timeout_ms / 1000)
            except subprocess.TimeoutExpired:
                return _failure(RenderFailureKind.TIMEOUT, f"no result after {spec.timeout_ms} ms")
            if status != 0:
                return _failure(RenderFailureKind.COMPILE_ERROR, f"renderer exited with status {status}")
            if not png_path.is_file():
                return _failure(RenderFailureKind.EMPTY_OUTPUT, "renderer wrote no image")
            try:
                image = load_gray(png_path)
            except (OSError, ValueError, SyntaxError) as e:
                return _failure(RenderFailureKind.EMPTY_OUTPUT, f"unreadable image: {e}")

        cropped = crop_to_ink(image, self.settings.margin)
        if cropped is None:
            return _failure(RenderFailureKind.EMPTY_OUTPUT, "image has no ink")
        return RenderOutcome(image=cropped)

    def render_cached(self, spec: RenderSpec) -> RenderOutcome:
        """Render through the cache; timeouts are never cached."""
        if self.cache is None:
            return self.render(spec)
        key = RenderCache.key(spec, self.version)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        outcome = self.render(spec)
        if outcome.ok or outcome.failure.kind != RenderFailureKind.TIMEOUT:
            self.cache.put(key, outcome)
        return outcome

    def batch_render(
        self,
        specs: Sequence[RenderSpec],
        workers: int = 1,
        cached: bool = True,
        progress: bool = False,
    ) -> Tuple[List[RenderOutcome], float]:
        """Render many formulas concurrently.

        Args:
            specs: Rendering requests
            workers: Concurrent renderer processes
            cached: Go through the render cache when one is configured
            progress: Show a progress bar on stderr

        Returns:
            Outcomes in input order and the failure rate in percent
        """
        if workers < 1:
            raise ValueError("workers must be at least 1")
        run = self.render_cached if cached else self.render
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(tqdm(
                pool.map(run, specs),
                total=len(specs),
                desc="render",
                file=sys.stderr,
                disable=not progress,
            ))
        failures = sum(1 for outcome in outcomes if not outcome.ok)
        fail_rate = 100.0 * failures / len(outcomes) if outcomes else 0.0
        StageLogger.log("render", f"{len(specs)} spec(s), {workers} worker(s)", f"fail rate {fail_rate:.2f}%")
        return outcomes, fail_rate
