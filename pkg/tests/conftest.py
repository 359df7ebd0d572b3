"""
Pytest configuration and shared fixtures for testing.
"""

import shlex
import subprocess
import sys
import threading
from pathlib import Path
from typing import Callable, Iterable, Tuple

import numpy as np
import pytest
from PIL import Image, ImageDraw, ImageFont

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.config import Config, RendererSettings
from src.render import Renderer
from src.schemas import AugmentConfig, TextureSource


# ============================================================================
# Configuration Fixtures
# ============================================================================

@pytest.fixture(scope="session")
def project_root_path():
    """Return the project root directory."""
    return Path(__file__).parent.parent


@pytest.fixture(scope="session")
def data_path(project_root_path):
    """Return the data directory path."""
    return project_root_path / "data"


@pytest.fixture
def quiet_augment():
    """Augmentation settings with every effect switched off."""
    return AugmentConfig(
        p_texture=0.0,
        p_lighting=0.0,
        p_line_noise=0.0,
        p_shadow=0.0,
        p_bleed=0.0,
        p_fade=0.0,
    )


@pytest.fixture
def test_config():
    """Config with small, fast settings for pipeline tests."""
    return Config.model_validate({
        "renderer": {"fonts": {"cm": "", "times": "\\usepackage{newtxmath}"}, "version": "fake-1"},
        "build": {"workers": 2, "seed": 7},
    })


# ============================================================================
# Fake Render Backend
# ============================================================================

def formula_from_document(document: str) -> str:
    """Pull the formula back out of the standalone document the renderer writes."""
    body = document.split("$\\displaystyle ", 1)[1]
    return body.rsplit("$", 1)[0].strip()


class FakeBackend:
    """In-process backend drawing the formula text with Pillow's default font.

    Fails (exit 1) on `\\undefined`, times out on `\\timeout` and writes a
    blank page for `\\blank`. Deterministic for a fixed formula and dpi.
    """

    version = "fake-1"

    def __init__(self):
        self.calls = 0
        self.documents = []
        self._lock = threading.Lock()

    def check_available(self) -> None:
        pass

    def run(self, tex_path: Path, png_path: Path, dpi: int, timeout_s: float) -> int:
        document = tex_path.read_text(encoding="utf-8")
        latex = formula_from_document(document)
        with self._lock:
            self.calls += 1
            self.documents.append(document)
        if "\\undefined" in latex:
            return 1
        if "\\timeout" in latex:
            raise subprocess.TimeoutExpired(cmd="fake", timeout=timeout_s)
        if "\\blank" in latex:
            Image.new("L", (40, 20), 255).save(png_path)
            return 0

        text = "".join(ch if ch.isascii() and ch.isprintable() else "?" for ch in latex)
        font = ImageFont.load_default()
        measure = ImageDraw.Draw(Image.new("L", (1, 1), 255))
        left, top, right, bottom = measure.textbbox((0, 0), text, font=font)
        image = Image.new("L", (right - left + 20, bottom - top + 20), 255)
        ImageDraw.Draw(image).text((10 - left, 10 - top), text, fill=0, font=font)
        scale = max(1, dpi // 100)
        if scale > 1:
            image = image.resize((image.width * scale, image.height * scale), Image.NEAREST)
        image.save(png_path)
        return 0


@pytest.fixture
def fake_backend():
    """Fresh fake backend with an invocation counter."""
    return FakeBackend()


@pytest.fixture
def renderer_settings():
    """Renderer settings matching the fake backend."""
    return RendererSettings(fonts={"cm": "", "times": "\\usepackage{newtxmath}"}, version="fake-1", dpi=100)


@pytest.fixture
def renderer(renderer_settings, fake_backend):
    """Renderer without a cache, backed by the fake backend."""
    return Renderer(renderer_settings, backend=fake_backend)


@pytest.fixture
def cached_renderer(renderer_settings, fake_backend, tmp_path):
    """Renderer with a render cache in a temporary directory."""
    return Renderer(renderer_settings, backend=fake_backend, cache_dir=tmp_path / "cache")


@pytest.fixture(scope="session")
def fake_renderer_command(project_root_path):
    """Command template running tests/fake_renderer.py as a subprocess."""
    script = project_root_path / "tests" / "fake_renderer.py"
    return f"{shlex.quote(sys.executable)} {shlex.quote(str(script))} {{input-file}} {{output-file}} {{dpi}}"


# ============================================================================
# Corpus Fixtures
# ============================================================================

SAMPLE_MARKDOWN = r"""# Sample Paper

We study the energy of a particle. The kinetic energy is $E = \frac{1}{2} m v^2$ and
the momentum is \(p = m v\). Combining them gives a useful identity.

$$
E = \frac{p^2}{2m}
$$

The rotation matrix is shown below.

\[
R = \begin{pmatrix} \cos\theta & -\sin\theta \\ \sin\theta & \cos\theta \end{pmatrix}
\]

\begin{align}
a &= b + c \\
d &= e - f
\end{align}

```python
x = "$not math$"
```

A broken formula \(\frac{a}{ stays out of the dataset.
"""


@pytest.fixture
def sample_markdown():
    """Markdown text with inline, display, environment and broken math."""
    return SAMPLE_MARKDOWN


@pytest.fixture
def corpus_dir(tmp_path):
    """Directory with two Markdown documents."""
    root = tmp_path / "corpus"
    (root / "sub").mkdir(parents=True)
    (root / "paper.md").write_text(SAMPLE_MARKDOWN, encoding="utf-8")
    (root / "sub" / "notes.mmd").write_text(
        "Sums appear often in analysis texts.\n\n"
        "$\\sum_{i=1}^{n} i = \\frac{n(n+1)}{2}$ and $x^2 + y^2 = z^2$ and $\\alpha + \\beta$.\n\n"
        "$$\\int_0^1 f(x) \\, dx$$\n",
        encoding="utf-8",
    )
    (root / "ignored.txt").write_text("$a+b$", encoding="utf-8")
    return root


# ============================================================================
# Image Fixtures
# ============================================================================

@pytest.fixture
def mask_from_points() -> Callable[[Tuple[int, int], Iterable[Tuple[int, int]]], np.ndarray]:
    """Build a boolean mask of a given (height, width) with the listed (row, col) pixels set."""
    def build(shape, points):
        mask = np.zeros(shape, dtype=bool)
        for row, col in points:
            mask[row, col] = True
        return mask
    return build


@pytest.fixture
def glyph_image():
    """White 40x60 image with a dark 10x20 block in the middle."""
    image = np.full((40, 60), 255, dtype=np.uint8)
    image[15:25, 20:40] = 0
    return image


@pytest.fixture
def texture_dir(tmp_path):
    """Directory holding two small texture images."""
    root = tmp_path / "textures"
    root.mkdir()
    rng = np.random.default_rng(3)
    for index in range(2):
        pixels = rng.integers(200, 250, size=(24, 32), dtype=np.uint8)
        Image.fromarray(pixels, mode="L").save(root / f"paper{index}.png")
    return root


@pytest.fixture
def directory_source(texture_dir):
    """Texture source reading from the texture directory fixture."""
    return TextureSource(mode="Directory", dir=texture_dir, seed=1)
