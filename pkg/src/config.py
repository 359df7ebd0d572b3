"""Configuration loading for texforge."""

import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.schemas import (
    AugmentConfig,
    ConfigError,
    CurateConfig,
    EnhanceConfig,
    EpmrConfig,
)

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

RENDERER_ENV = "TEXFORGE_RENDERER"
WORKERS_ENV = "TEXFORGE_WORKERS"
LOG_LEVEL_ENV = "TEXFORGE_LOG_LEVEL"

DEFAULT_RENDER_COMMAND = (
    "latex -interaction=nonstopmode -halt-on-error -output-directory={work-dir} {input-file}"
    " && dvipng -q -T tight -D {dpi} -bg White -o {output-file} {work-dir}/formula.dvi"
)

DEFAULT_FONTS: Dict[str, str] = {
    "cm": "",
    "lmodern": "\\usepackage{lmodern}",
    "times": "\\usepackage{newtxtext,newtxmath}",
    "palatino": "\\usepackage{newpxtext,newpxmath}",
    "fourier": "\\usepackage{fourier}",
}


class RendererSettings(BaseModel):
    """External renderer command and font profiles."""

    model_config = ConfigDict(extra="forbid")

    command: str = Field(DEFAULT_RENDER_COMMAND, description="Command template; steps separated by '&&'")
    timeout_ms: int = Field(30000, ge=1000, description="Timeout per formula in milliseconds")
    dpi: int = Field(200, ge=72, description="Render resolution")
    margin: int = Field(8, ge=0, description="White margin around the cropped ink box")
    fonts: Dict[str, str] = Field(default_factory=lambda: dict(DEFAULT_FONTS), description="Font id to preamble snippet")
    cjk_font: Optional[str] = Field(None, description="Font id used for formulas containing CJK text")
    version: str = Field("", description="Backend version tag mixed into cache keys")

    @field_validator("fonts", mode="before")
    @classmethod
    def _fonts_from_list(cls, value: Any) -> Any:
        if isinstance(value, list):
            return {f"font{i}": snippet for i, snippet in enumerate(value)}
        return value

    @field_validator("fonts")
    @classmethod
    def _fonts_nonempty(cls, value: Dict[str, str]) -> Dict[str, str]:
        if not value:
            raise ValueError("at least one font must be configured")
        return value


class MetricsSettings(EpmrConfig):
    """EPMR settings plus evaluation options."""

    normalize: bool = Field(False, description="De-stylize both sides before scoring")
    font_id: Optional[str] = Field(None, description="Font profile used for both renders; defaults to the first renderer font")
    dpi: Optional[int] = Field(None, ge=72, description="Render resolution; defaults to renderer.dpi")


class BuildSettings(BaseModel):
    """Pipeline orchestration settings."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, description="Global build seed")
    size: Optional[int] = Field(None, ge=0, description="Number of candidates; defaults to the unit count")
    workers: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1, description="Parallel workers")
    font_assignment: str = Field("random", description="'random' (seeded) or 'round_robin'")
    cache_dir: Optional[str] = Field(None, description="Render cache directory; defaults to <out>/.render-cache")
    stratify_sizes: Dict[str, int] = Field(
        default_factory=lambda: {name: 5000 for name in ("Symbol", "Ordinary", "TextHybrid", "Matrix", "Complex")},
        description="Samples per benchmark stratum",
    )

    @field_validator("font_assignment")
    @classmethod
    def _known_assignment(cls, value: str) -> str:
        if value not in ("random", "round_robin"):
            raise ValueError("font_assignment must be 'random' or 'round_robin'")
        return value


class Config(BaseModel):
    """Top-level configuration, one section per pipeline stage."""

    model_config = ConfigDict(extra="forbid")

    renderer: RendererSettings = Field(default_factory=RendererSettings)
    enhance: EnhanceConfig = Field(default_factory=EnhanceConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    curate: CurateConfig = Field(default_factory=CurateConfig)
    metrics: MetricsSettings = Field(default_factory=MetricsSettings)
    build: BuildSettings = Field(default_factory=BuildSettings)

    @model_validator(mode="after")
    def _known_fonts(self) -> "Config":
        fonts = self.renderer.fonts
        if self.metrics.font_id is None:
            self.metrics.font_id = next(iter(fonts))
        elif self.metrics.font_id not in fonts:
            raise ValueError(f"metrics.font_id '{self.metrics.font_id}' is not one of the renderer fonts {sorted(fonts)}")
        if self.renderer.cjk_font is not None and self.renderer.cjk_font not in fonts:
            raise ValueError(f"renderer.cjk_font '{self.renderer.cjk_font}' is not one of the renderer fonts {sorted(fonts)}")
        return self


def _format_validation_error(error: ValidationError) -> str:
    messages = []
    for item in error.errors():
        key = ".".join(str(part) for part in item["loc"])
        if not key:
            messages.append(f"invalid config: {item['msg']}")
        elif item["type"] == "extra_forbidden":
            messages.append(f"unknown config key '{key}'")
        else:
            messages.append(f"invalid value for '{key}': {item['msg']}")
    return "; ".join(messages)


def config_from_dict(data: Dict[str, Any]) -> Config:
    """Validate a raw mapping into a Config.

    Raises:
        ConfigError: On unknown keys or invalid values
    """
    try:
        return Config.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e)) from e


def apply_env(data: Dict[str, Any]) -> Dict[str, Any]:
    """Overlay environment variables on a raw config mapping."""
    renderer = os.getenv(RENDERER_ENV)
    if renderer:
        data.setdefault("renderer", {})["command"] = renderer
    workers = os.getenv(WORKERS_ENV)
    if workers:
        data.setdefault("build", {})["workers"] = workers
    return data


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> Config:
    """Load configuration from defaults, a TOML file, the environment and overrides.

    Args:
        path: Optional TOML file
        overrides: Dotted keys (e.g. "build.seed") set last, typically from CLI flags

    Returns:
        Validated Config

    Raises:
        ConfigError: If the file is missing or unreadable, or validation fails
    """
    data: Dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"config file '{config_path}' not found")
        try:
            with config_path.open("rb") as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"config file '{config_path}' is not valid TOML: {e}") from e
        logger.debug(f"Loaded config file {config_path}")

    apply_env(data)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            section = section.setdefault(part, {})
        section[leaf] = value
    return config_from_dict(data)
