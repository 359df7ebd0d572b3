"""
Unit and integration tests for the formula renderer and its cache.
"""

import shutil
import subprocess

import numpy as np
import pytest
from PIL import Image

from src.config import RendererSettings
from src.render import (
    CommandBackend,
    RenderCache,
    Renderer,
    crop_to_ink,
    has_cjk,
    ink_bbox,
    load_gray,
    save_gray,
)
from src.schemas import ConfigError, RenderFailureKind, RendererUnavailable


# ============================================================================
# Image Helper Tests
# ============================================================================

@pytest.mark.unit
@pytest.mark.render
class TestImageHelpers:
    """Tests for ink boxes, cropping and image IO."""

    def test_ink_bbox(self, glyph_image):
        """Test the exclusive bounding box of dark pixels."""
        assert ink_bbox(glyph_image) == (15, 20, 25, 40)

    def test_ink_bbox_blank(self):
        """Test that a white image has no ink."""
        assert ink_bbox(np.full((5, 5), 255, dtype=np.uint8)) is None

    def test_ink_bbox_threshold(self):
        """Test that only pixels strictly below the threshold count."""
        image = np.full((4, 4), 255, dtype=np.uint8)
        image[1, 1] = 128
        image[2, 2] = 127

        assert ink_bbox(image) == (2, 2, 3, 3)

    def test_crop_to_ink(self, glyph_image):
        """Test cropping plus a white margin."""
        cropped = crop_to_ink(glyph_image, margin=2)

        assert cropped.shape == (14, 24)
        assert (cropped[:2] == 255).all()
        assert (cropped[2:12, 2:22] == 0).all()

    def test_crop_blank(self):
        """Test that cropping a blank image gives None."""
        assert crop_to_ink(np.full((5, 5), 255, dtype=np.uint8), margin=1) is None

    def test_load_gray_flattens_alpha(self, tmp_path):
        """Test that transparent pixels load as white."""
        path = tmp_path / "alpha.png"
        rgba = Image.new("RGBA", (3, 2), (0, 0, 0, 0))
        rgba.putpixel((1, 1), (0, 0, 0, 255))
        rgba.save(path)

        image = load_gray(path)
        assert image.dtype == np.uint8
        assert image.shape == (2, 3)
        assert image[0, 0] == 255
        assert image[1, 1] == 0

    def test_save_and_load(self, glyph_image, tmp_path):
        """Test that grayscale images survive a save/load cycle."""
        path = tmp_path / "glyph.png"
        save_gray(glyph_image, path)

        assert np.array_equal(load_gray(path), glyph_image)

    @pytest.mark.parametrize("text, expected", [
        ("x + y", False),
        ("\\text{函数} x", True),
        ("\\text{ひらがな}", True),
        ("\\text{한국어}", True),
        ("é", False),
    ])
    def test_has_cjk(self, text, expected):
        """Test CJK detection."""
        assert has_cjk(text) is expected


# ============================================================================
# Renderer Tests
# ============================================================================

@pytest.mark.unit
@pytest.mark.render
class TestRenderer:
    """Tests for Renderer with the in-process fake backend."""

    def test_spec_defaults(self, renderer):
        """Test that specs take the first font and configured dpi."""
        spec = renderer.spec("x")

        assert spec.font_id == "cm"
        assert spec.dpi == 100
        assert renderer.spec("x", font_id="times", dpi=300).dpi == 300

    def test_document(self, renderer):
        """Test the standalone document around a formula."""
        document = renderer.document(renderer.spec("x^2", font_id="times"))

        assert "\\usepackage{newtxmath}" in document
        assert "$\\displaystyle x^2$" in document
        assert "\\documentclass" in document

    def test_unknown_font(self, renderer):
        """Test that unconfigured font ids are a config error."""
        with pytest.raises(ConfigError):
            renderer.document(renderer.spec("x", font_id="missing"))

    def test_render_success(self, renderer, fake_backend):
        """Test a successful render is cropped with a white margin."""
        outcome = renderer.render(renderer.spec("a+b=c"))

        assert outcome.ok
        assert outcome.failure is None
        assert outcome.image.dtype == np.uint8
        margin = renderer.settings.margin
        assert (outcome.image[:margin] == 255).all()
        assert (outcome.image[:, -margin:] == 255).all()
        assert ink_bbox(outcome.image) is not None
        assert fake_backend.calls == 1
        assert renderer.invocations == 1

    def test_syntax_reject_skips_backend(self, renderer, fake_backend):
        """Test that invalid LaTeX never reaches the backend."""
        outcome = renderer.render(renderer.spec("\\frac{a}{"))

        assert outcome.failure.kind == RenderFailureKind.SYNTAX_REJECT
        assert fake_backend.calls == 0
        assert renderer.invocations == 0

    @pytest.mark.parametrize("latex, kind", [
        ("\\undefined x", RenderFailureKind.COMPILE_ERROR),
        ("\\timeout x", RenderFailureKind.TIMEOUT),
        ("\\blank x", RenderFailureKind.EMPTY_OUTPUT),
    ])
    def test_failures(self, renderer, latex, kind):
        """Test typed render failures."""
        outcome = renderer.render(renderer.spec(latex))

        assert not outcome.ok
        assert outcome.failure.kind == kind

    def test_dpi_scales_image(self, renderer):
        """Test that a higher resolution gives a larger image."""
        small = renderer.render(renderer.spec("x+y", dpi=100)).image
        large = renderer.render(renderer.spec("x+y", dpi=200)).image

        assert large.shape[0] > small.shape[0]
        assert large.shape[1] > small.shape[1]

    def test_route_font(self, fake_backend):
        """Test that CJK formulas go to the CJK font profile."""
        settings = RendererSettings(fonts={"cm": "", "cjk": "\\usepackage{CJKutf8}"}, cjk_font="cjk")
        renderer = Renderer(settings, backend=fake_backend)

        assert renderer.route_font("\\text{函数} x", "cm") == "cjk"
        assert renderer.route_font("x", "cm") == "cm"
        assert Renderer(RendererSettings(), backend=fake_backend).route_font("\\text{函数}", "cm") == "cm"

    def test_batch_render(self, renderer):
        """Test input order and the failure rate."""
        specs = [renderer.spec(latex) for latex in ["a", "\\undefined", "b", "c"]]
        outcomes, fail_rate = renderer.batch_render(specs, workers=3)

        assert [outcome.ok for outcome in outcomes] == [True, False, True, True]
        assert fail_rate == pytest.approx(25.0)

    def test_batch_render_empty(self, renderer):
        """Test that an empty batch has a zero failure rate."""
        assert renderer.batch_render([]) == ([], 0.0)

    def test_batch_render_workers(self, renderer):
        """Test the worker count lower bound."""
        with pytest.raises(ValueError):
            renderer.batch_render([renderer.spec("a")], workers=0)


# ============================================================================
# Cache Tests
# ============================================================================

@pytest.mark.unit
@pytest.mark.render
class TestRenderCache:
    """Tests for the content-addressed render cache."""

    def test_hit_skips_backend(self, cached_renderer, fake_backend):
        """Test that a second render is served from the cache."""
        spec = cached_renderer.spec("x^2 + 1")
        first = cached_renderer.render_cached(spec)
        second = cached_renderer.render_cached(spec)

        assert fake_backend.calls == 1
        assert not first.from_cache
        assert second.from_cache
        assert np.array_equal(first.image, second.image)

    def test_failures_cached(self, cached_renderer, fake_backend):
        """Test that compile errors are cached."""
        spec = cached_renderer.spec("\\undefined")
        cached_renderer.render_cached(spec)
        outcome = cached_renderer.render_cached(spec)

        assert fake_backend.calls == 1
        assert outcome.failure.kind == RenderFailureKind.COMPILE_ERROR

    def test_timeouts_not_cached(self, cached_renderer, fake_backend):
        """Test that timeouts are retried."""
        spec = cached_renderer.spec("\\timeout")
        cached_renderer.render_cached(spec)
        cached_renderer.render_cached(spec)

        assert fake_backend.calls == 2

    def test_key_inputs(self, renderer):
        """Test that formula, font, dpi and version all change the key."""
        base = renderer.spec("x")
        keys = {
            RenderCache.key(base, "v1"),
            RenderCache.key(renderer.spec("y"), "v1"),
            RenderCache.key(renderer.spec("x", font_id="times"), "v1"),
            RenderCache.key(renderer.spec("x", dpi=300), "v1"),
            RenderCache.key(base, "v2"),
        }

        assert len(keys) == 5
        assert RenderCache.key(base, "v1") == RenderCache.key(renderer.spec("x"), "v1")

    def test_fan_out_layout(self, cached_renderer):
        """Test the two-level directory layout."""
        spec = cached_renderer.spec("z")
        cached_renderer.render_cached(spec)
        key = RenderCache.key(spec, cached_renderer.version)

        assert (cached_renderer.cache.root / key[:2] / key[2:4] / f"{key}.png").is_file()

    def test_corrupt_entry_is_miss(self, cached_renderer, fake_backend):
        """Test that an unreadable entry triggers a fresh render."""
        spec = cached_renderer.spec("w")
        cached_renderer.render_cached(spec)
        key = RenderCache.key(spec, cached_renderer.version)
        (cached_renderer.cache.root / key[:2] / key[2:4] / f"{key}.png").write_bytes(b"not a png")

        outcome = cached_renderer.render_cached(spec)
        assert outcome.ok
        assert not outcome.from_cache
        assert fake_backend.calls == 2

    def test_clear(self, cached_renderer, fake_backend):
        """Test that clearing forces re-rendering."""
        spec = cached_renderer.spec("v")
        cached_renderer.render_cached(spec)
        cached_renderer.cache.clear()
        cached_renderer.render_cached(spec)

        assert fake_backend.calls == 2

    def test_uncached_batch(self, cached_renderer, fake_backend):
        """Test that batch rendering can bypass the cache."""
        specs = [cached_renderer.spec("u")] * 2
        cached_renderer.batch_render(specs, workers=1, cached=False)

        assert fake_backend.calls == 2


# ============================================================================
# Command Backend Tests
# ============================================================================

@pytest.mark.integration
@pytest.mark.render
class TestCommandBackend:
    """Tests running a real subprocess through the command template."""

    @pytest.fixture
    def command_renderer(self, fake_renderer_command):
        settings = RendererSettings(command=fake_renderer_command, fonts={"cm": ""}, dpi=100, timeout_ms=1000)
        return Renderer(settings)

    def test_success(self, command_renderer):
        """Test a subprocess render."""
        command_renderer.check_available()
        outcome = command_renderer.render(command_renderer.spec("a+b"))

        assert outcome.ok
        assert ink_bbox(outcome.image) is not None

    def test_compile_error(self, command_renderer):
        """Test a nonzero exit status."""
        outcome = command_renderer.render(command_renderer.spec("\\undefined"))

        assert outcome.failure.kind == RenderFailureKind.COMPILE_ERROR

    def test_no_image(self, command_renderer):
        """Test a command that exits cleanly without output."""
        outcome = command_renderer.render(command_renderer.spec("\\noimage"))

        assert outcome.failure.kind == RenderFailureKind.EMPTY_OUTPUT

    @pytest.mark.slow
    def test_timeout(self, command_renderer):
        """Test that a hung renderer is killed after the timeout."""
        outcome = command_renderer.render(command_renderer.spec("\\timeout"))

        assert outcome.failure.kind == RenderFailureKind.TIMEOUT

    @pytest.mark.slow
    @pytest.mark.skipif(shutil.which("sleep") is None, reason="needs the sleep executable")
    def test_timeout_covers_whole_command(self):
        """Test that a multi-step command is stopped once the total timeout passes."""
        settings = RendererSettings(command="sleep 0.7 && sleep 0.7 && sleep 0.7", fonts={"cm": ""}, timeout_ms=1000)
        renderer = Renderer(settings)
        outcome = renderer.render(renderer.spec("x"))

        assert outcome.failure.kind == RenderFailureKind.TIMEOUT

    def test_missing_executable(self):
        """Test the availability check and run with an executable that does not exist."""
        renderer = Renderer(RendererSettings(command="texforge-no-such-binary {input-file} {output-file}"))

        with pytest.raises(RendererUnavailable):
            renderer.check_available()
        assert renderer.render(renderer.spec("x")).failure.kind == RenderFailureKind.COMPILE_ERROR

    def test_placeholders(self, tmp_path):
        """Test placeholder substitution and step splitting."""
        backend = CommandBackend("latex -output-directory={work-dir} {input-file} && dvipng -D {dpi} -o {output-file} x.dvi")
        tex = tmp_path / "formula.tex"
        png = tmp_path / "formula.png"

        assert len(backend.steps) == 2
        assert backend._arguments(backend.steps[0], tex, png, 150) == [
            "latex", f"-output-directory={tmp_path}", str(tex),
        ]
        assert backend._arguments(backend.steps[1], tex, png, 150) == [
            "dvipng", "-D", "150", "-o", str(png), "x.dvi",
        ]

    def test_empty_command(self):
        """Test that an empty template is a config error."""
        with pytest.raises(ConfigError):
            CommandBackend("  &&  ")


@pytest.mark.unit
@pytest.mark.render
class TestCommandBackendMocked:
    """Tests of the command backend with the process layer patched out."""

    def test_check_covers_every_step(self, mocker):
        """Test that a missing second executable is reported by name."""
        which = mocker.patch("src.render.shutil.which", side_effect=lambda name: None if name == "dvipng" else f"/usr/bin/{name}")
        backend = CommandBackend("latex {input-file} && dvipng -o {output-file} formula.dvi")

        with pytest.raises(RendererUnavailable, match="dvipng"):
            backend.check_available()
        assert [c.args[0] for c in which.call_args_list] == ["latex", "dvipng"]

    def test_run_stops_at_first_failing_step(self, mocker, tmp_path):
        """Test that later steps are skipped once one exits nonzero."""
        run = mocker.patch(
            "src.render.subprocess.run",
            return_value=mocker.Mock(returncode=3, stderr=b"! Undefined control sequence."),
        )
        backend = CommandBackend("latex {input-file} && dvipng -o {output-file} formula.dvi")

        status = backend.run(tmp_path / "formula.tex", tmp_path / "formula.png", 100, 1.0)

        assert status == 3
        assert run.call_count == 1
        assert run.call_args.kwargs["cwd"] == tmp_path

    def test_timeout_shared_across_steps(self, mocker, tmp_path):
        """Test that each step only gets what is left of the time budget."""
        clock = iter([0.0, 0.0, 0.7])
        mocker.patch("src.render.time.monotonic", side_effect=lambda: next(clock, 0.7))
        run = mocker.patch("src.render.subprocess.run", return_value=mocker.Mock(returncode=0, stderr=b""))
        backend = CommandBackend("latex {input-file} && dvipng -o {output-file} formula.dvi")

        assert backend.run(tmp_path / "formula.tex", tmp_path / "formula.png", 100, 1.0) == 0
        timeouts = [c.kwargs["timeout"] for c in run.call_args_list]
        assert timeouts == [pytest.approx(1.0), pytest.approx(0.3)]

    def test_timeout_budget_spent(self, mocker, tmp_path):
        """Test that a later step is not started once the budget is used up."""
        clock = iter([0.0, 0.0, 1.2])
        mocker.patch("src.render.time.monotonic", side_effect=lambda: next(clock, 1.2))
        run = mocker.patch("src.render.subprocess.run", return_value=mocker.Mock(returncode=0, stderr=b""))
        backend = CommandBackend("latex {input-file} && dvipng -o {output-file} formula.dvi")

        with pytest.raises(subprocess.TimeoutExpired):
            backend.run(tmp_path / "formula.tex", tmp_path / "formula.png", 100, 1.0)
        assert run.call_count == 1
