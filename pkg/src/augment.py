"""Paper textures plus paper-level and ink-level augmentation of rendered formulas."""

import logging
import math
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from src.schemas import (
    AugmentConfig,
    GrayImage,
    TextureError,
    TextureMode,
    TextureSource,
)

logger = logging.getLogger(__name__)

TEXTURE_SUFFIXES = (".png", ".jpg", ".jpeg")
TEXTURE_MEAN_RANGE = (205.0, 245.0)


# ============================================================================
# Textures
# ============================================================================

def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


def value_noise(height: int, width: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth value noise in [0, 1] on a lattice of `scale`-pixel cells."""
    scale = max(scale, 1.0)
    grid = rng.random((int(np.ceil(height / scale)) + 2, int(np.ceil(width / scale)) + 2))

    y = np.linspace(0, (height - 1) / scale, height)
    x = np.linspace(0, (width - 1) / scale, width)
    yi = np.floor(y).astype(int)
    xi = np.floor(x).astype(int)
    yf = _fade(y - yi)[:, None]
    xf = _fade(x - xi)[None, :]
    yi = yi[:, None]
    xi = xi[None, :]

    top = grid[yi, xi] + xf * (grid[yi, xi + 1] - grid[yi, xi])
    bottom = grid[yi + 1, xi] + xf * (grid[yi + 1, xi + 1] - grid[yi + 1, xi])
    return top + yf * (bottom - top)


def fractal_noise(
    height: int,
    width: int,
    rng: np.random.Generator,
    octaves: int = 4,
    base_scale: float = 48.0,
    persistence: float = 0.5,
) -> np.ndarray:
    """Multi-octave value noise normalized to [0, 1]."""
    total = np.zeros((height, width))
    amplitude = 1.0
    weight = 0.0
    scale = base_scale
    for _ in range(octaves):
        total += amplitude * value_noise(height, width, scale, rng)
        weight += amplitude
        amplitude *= persistence
        scale /= 2.0
    return total / weight


def _fibers(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Sparse short dark streaks, returned as darkening amounts."""
    layer = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(layer)
    count = min(int(rng.poisson(height * width / 4000.0)), 200)
    for _ in range(count):
        x0 = float(rng.uniform(0, width))
        y0 = float(rng.uniform(0, height))
        angle = float(rng.uniform(0, math.pi))
        length = float(rng.uniform(3, 12))
        x1 = x0 + length * math.cos(angle)
        y1 = y0 + length * math.sin(angle)
        draw.line([(x0, y0), (x1, y1)], fill=int(rng.integers(6, 18)), width=1)
    return np.asarray(layer, dtype=np.float64)


def _vignette(height: int, width: int, strength: float) -> np.ndarray:
    y = np.arange(height)[:, None] - (height - 1) / 2.0
    x = np.arange(width)[None, :] - (width - 1) / 2.0
    radius = np.hypot(y / max(height / 2.0, 1.0), x / max(width / 2.0, 1.0)) / math.sqrt(2.0)
    return 1.0 - strength * radius ** 2


def procedural_texture(width: int, height: int, rng: np.random.Generator) -> GrayImage:
    """Paper-like texture from fractal noise, fiber streaks and a soft vignette.

    The mean intensity is pulled into [205, 245].
    """
    base = rng.uniform(218.0, 238.0)
    texture = base + (fractal_noise(height, width, rng) - 0.5) * 24.0
    texture -= _fibers(height, width, rng)
    texture *= _vignette(height, width, rng.uniform(0.02, 0.06))

    low, high = TEXTURE_MEAN_RANGE
    mean = float(texture.mean())
    if mean < low:
        texture += low - mean
    elif mean > high:
        texture -= mean - high
    return np.clip(np.rint(texture), 0, 255).astype(np.uint8)


@lru_cache(maxsize=8)
def _texture_files(directory: str) -> Tuple[Path, ...]:
    root = Path(directory)
    if not root.is_dir():
        return ()
    return tuple(sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in TEXTURE_SUFFIXES))


@lru_cache(maxsize=32)
def _load_texture(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        texture = np.asarray(im.convert("L"), dtype=np.uint8).copy()
    texture.setflags(write=False)
    return texture


def fit_texture(texture: GrayImage, width: int, height: int, rng: np.random.Generator) -> GrayImage:
    """Resample a texture up if needed, then take a random crop of the given size."""
    th, tw = texture.shape
    scale = max(width / tw, height / th, 1.0)
    if scale > 1.0:
        size = (max(width, math.ceil(tw * scale)), max(height, math.ceil(th * scale)))
        texture = np.asarray(Image.fromarray(texture, mode="L").resize(size, Image.BILINEAR))
        th, tw = texture.shape
    top = int(rng.integers(0, th - height + 1))
    left = int(rng.integers(0, tw - width + 1))
    return np.array(texture[top:top + height, left:left + width], dtype=np.uint8)


def make_texture(
    size: Tuple[int, int],
    src: TextureSource,
    rng: Optional[np.random.Generator] = None,
) -> GrayImage:
    """Create a paper texture of size (width, height).

    Args:
        size: (width, height) in pixels
        src: Procedural generation or a directory of texture images
        rng: Random generator; seeded from `src.seed` when omitted

    Returns:
        Texture with shape (height, width)

    Raises:
        ValueError: If a dimension is below 1
        TextureError: If Directory mode finds no readable image
    """
    width, height = size
    if width < 1 or height < 1:
        raise ValueError("texture size must be at least 1x1")
    if rng is None:
        rng = np.random.default_rng(src.seed)

    if src.mode == TextureMode.PROCEDURAL:
        return procedural_texture(width, height, rng)

    files = _texture_files(str(src.dir))
    if not files:
        raise TextureError(f"no texture images in '{src.dir}'")
    path = files[int(rng.integers(len(files)))]
    try:
        texture = _load_texture(path)
    except OSError as e:
        raise TextureError(f"cannot read texture '{path}': {e}") from e
    return fit_texture(texture, width, height, rng)


def compose(render: GrayImage, texture: GrayImage, rng: Optional[np.random.Generator] = None) -> GrayImage:
    """Multiply a render onto a texture: out = render * texture / 255.

    A texture of a different size is fitted to the render first.
    """
    height, width = render.shape
    if texture.shape != render.shape:
        texture = fit_texture(texture, width, height, rng or np.random.default_rng(0))
    product = render.astype(np.uint16) * texture.astype(np.uint16) + 127
    return (product // 255).astype(np.uint8)


# ============================================================================
# Paper augmentation
# ============================================================================

def lighting_field(height: int, width: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative field in [1 - strength, 1], linear or radial."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    if rng.random() < 0.5:
        angle = rng.uniform(0, 2 * math.pi)
        ramp = x * math.cos(angle) + y * math.sin(angle)
    else:
        cy = rng.uniform(0, height)
        cx = rng.uniform(0, width)
        ramp = np.hypot(y - cy, x - cx)
    span = float(ramp.max() - ramp.min())
    ramp = (ramp - ramp.min()) / span if span > 0 else np.zeros_like(ramp)
    return 1.0 - strength * ramp


def _line_noise(img: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    height, width = img.shape
    layer = Image.new("L", (width, height), 255)
    draw = ImageDraw.Draw(layer)
    for _ in range(count):
        if rng.random() < 0.5:
            y0 = float(rng.uniform(0, height))
            points = [(0.0, y0), (float(width), y0 + float(rng.uniform(-3, 3)))]
        else:
            points = [
                (float(rng.uniform(0, width)), float(rng.uniform(0, height))),
                (float(rng.uniform(0, width)), float(rng.uniform(0, height))),
            ]
        draw.line(points, fill=int(rng.integers(60, 170)), width=1)
    return np.minimum(img, np.asarray(layer, dtype=np.float64))


def _shadows(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    field = np.ones((height, width))
    for _ in range(int(rng.integers(1, 3))):
        cy = rng.uniform(0, height)
        cx = rng.uniform(0, width)
        sigma = rng.uniform(0.1, 0.3) * max(height, width)
        depth = rng.uniform(0.1, 0.3)
        field *= 1.0 - depth * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * sigma ** 2))
    return field


def _paper_effects(img: GrayImage, cfg: AugmentConfig, rng: np.random.Generator) -> Tuple[GrayImage, List[str]]:
    height, width = img.shape
    out = img.astype(np.float64)
    applied = []
    if rng.random() < cfg.p_lighting:
        out *= lighting_field(height, width, cfg.lighting_strength, rng)
        applied.append("lighting")
    if rng.random() < cfg.p_line_noise:
        low, high = cfg.line_count_range
        out = _line_noise(out, int(rng.integers(low, high + 1)), rng)
        applied.append("line_noise")
    if rng.random() < cfg.p_shadow:
        out *= _shadows(height, width, rng)
        applied.append("shadow")
    if not applied:
        return img.copy(), applied
    return np.clip(np.rint(out), 0, 255).astype(np.uint8), applied


def paper_augment(img: GrayImage, cfg: AugmentConfig, rng: np.random.Generator) -> GrayImage:
    """Apply lighting, line noise and shadows, each with its own probability."""
    return _paper_effects(img, cfg, rng)[0]


# ============================================================================
# Ink augmentation
# ============================================================================

def dilate_ink(img: GrayImage, radius: int) -> GrayImage:
    """Grayscale dilation of dark pixels: a minimum filter over a (2r+1) square."""
    if radius < 1:
        return img.copy()
    return ndimage.grey_erosion(img, size=(2 * radius + 1, 2 * radius + 1), mode="nearest")


def spread_ink(img: GrayImage, radius: int) -> GrayImage:
    """Ink bleed: dilate dark pixels, then soften with a 3x3 box blur."""
    if radius < 1:
        return img.copy()
    blurred = ndimage.uniform_filter(dilate_ink(img, radius).astype(np.float64), size=3, mode="nearest")
    return np.clip(np.rint(blurred), 0, 255).astype(np.uint8)


def fade_ink(img: GrayImage, gamma: float) -> GrayImage:
    """Remap intensities i -> 255 * (i / 255) ** gamma; gamma below 1 lightens ink."""
    lut = np.clip(np.rint(255.0 * (np.arange(256) / 255.0) ** gamma), 0, 255).astype(np.uint8)
    return lut[img]


def _ink_effects(img: GrayImage, cfg: AugmentConfig, rng: np.random.Generator) -> Tuple[GrayImage, List[str]]:
    out = img
    applied = []
    if rng.random() < cfg.p_bleed:
        out = spread_ink(out, cfg.bleed_radius)
        applied.append("bleed")
    if rng.random() < cfg.p_fade:
        out = fade_ink(out, cfg.fade_gamma)
        applied.append("fade")
    return (out if applied else img.copy()), applied


def ink_augment(img: GrayImage, cfg: AugmentConfig, rng: np.random.Generator) -> GrayImage:
    """Apply ink bleed and fade, each with its own probability."""
    return _ink_effects(img, cfg, rng)[0]


# ============================================================================
# Chain
# ============================================================================

def augment_image(
    render: GrayImage,
    cfg: AugmentConfig,
    texture_source: Optional[TextureSource] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[GrayImage, List[str]]:
    """Run the configured effect order over one rendered formula.

    Args:
        render: Cropped render
        cfg: Augmentation settings
        texture_source: Texture source; defaults to `cfg.texture`
        rng: Random generator; seeded from `cfg.seed` when omitted

    Returns:
        Augmented image (same shape) and the names of the effects applied
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    source = texture_source or cfg.texture
    height, width = render.shape
    out = render
    applied: List[str] = []
    for step in cfg.order:
        if step == "compose":
            if rng.random() < cfg.p_texture:
                out = compose(out, make_texture((width, height), source, rng), rng)
                applied.append("texture")
        elif step == "ink":
            out, names = _ink_effects(out, cfg, rng)
            applied.extend(names)
        elif step == "paper":
            out, names = _paper_effects(out, cfg, rng)
            applied.extend(names)
    if not applied:
        out = render.copy()
    return out, applied
