"""Saturating heatmap with log-spaced contours, composited over the stimulus."""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass, field

import numpy as np
from matplotlib import colormaps
from PIL import Image, ImageDraw
from PIL.PngImagePlugin import PngInfo
from skimage.measure import find_contours

from fixdens.data import DensityGrid, ValidationError

UNIFORM_CAPTION = "≈ uniform"
_UNIFORM_RTOL = 1e-9


@dataclass(frozen=True)
class VizConfig:
    saturation: float = 20.0
    gamma: float = 4.0
    opacity: float = 0.75
    colormap: str = "Reds"
    thick_width: int = 3
    thin_width: int = 1
    line_color: tuple[int, int, int] = (20, 20, 20)

    def __post_init__(self):
        if not self.saturation > 0:
            raise ValidationError("saturation level must be > 0")
        if not self.gamma > 1:
            raise ValidationError("contour base must be > 1")
        if not 0 <= self.opacity <= 1:
            raise ValidationError("opacity must lie in [0, 1]")
        if self.colormap not in colormaps:
            raise ValidationError(f"unknown colormap {self.colormap!r}")


@dataclass(frozen=True)
class ContourLevel:
    k: int
    level: float

    @property
    def thick(self) -> bool:
        return self.k == 0


@dataclass(eq=False)
class RenderedFigure:
    image: Image.Image
    metadata: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.size

    def to_png_bytes(self) -> bytes:
        info = PngInfo()
        for key in sorted(self.metadata):
            info.add_text(key, str(self.metadata[key]))
        buf = io.BytesIO()
        self.image.save(buf, format="PNG", pnginfo=info, optimize=False, compress_level=6)
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_png_bytes())


def density_ratio(grid: DensityGrid) -> np.ndarray:
    p = grid.to_probability().values
    return p * p.size


def saturating(d, saturation: float = 20.0):
    """L * (1 - exp(-d / L))."""
    return saturation * -np.expm1(-np.asarray(d, dtype=np.float64) / saturation)


def saturating_map(grid: DensityGrid, saturation: float = 20.0) -> np.ndarray:
    return saturating(density_ratio(grid), saturation)


def is_uniform(grid: DensityGrid) -> bool:
    p = grid.to_probability().values
    return bool(p.max() - p.min() <= _UNIFORM_RTOL * p.max())


def contour_levels(grid: DensityGrid, gamma: float = 4.0) -> list[ContourLevel]:
    """Levels gamma**k / (W*H) for every integer k inside the grid's value range."""
    if not gamma > 1:
        raise ValidationError("contour base must be > 1")
    p = grid.to_probability().values
    p_u = 1.0 / p.size
    if is_uniform(grid):
        return [ContourLevel(0, p_u)]
    lo, hi = p.min(), p.max()
    log_g = math.log(gamma)
    k_hi = math.floor(math.log(hi / p_u) / log_g + 1e-12)
    k_lo = -math.inf if lo <= 0 else math.ceil(math.log(lo / p_u) / log_g - 1e-12)
    # zero-valued pixels: start at the lowest level any pixel actually crosses
    if not math.isfinite(k_lo):
        positive = p[p > 0]
        k_lo = math.ceil(math.log(positive.min() / p_u) / log_g - 1e-12)
    levels = []
    for k in range(int(k_lo), int(k_hi) + 1):
        level = gamma**k * p_u
        if lo <= level * (1 + 1e-12) and level <= hi * (1 + 1e-12):
            levels.append(ContourLevel(k, level))
    return levels


def _load_stimulus(stimulus) -> Image.Image:
    if isinstance(stimulus, Image.Image):
        return stimulus.convert("RGB")
    if isinstance(stimulus, np.ndarray):
        a = stimulus
        if a.dtype != np.uint8:
            a = np.clip(a * (255 if a.max() <= 1 else 1), 0, 255).astype(np.uint8)
        return Image.fromarray(a).convert("RGB")
    try:
        with Image.open(stimulus) as im:
            return im.convert("RGB")
    except (OSError, ValueError) as e:
        raise ValidationError(f"cannot read stimulus {stimulus!r}: {e}") from None


def grid_hash(grid: DensityGrid) -> str:
    h = hashlib.sha256()
    h.update(f"{grid.width}x{grid.height}:{grid.space}".encode())
    h.update(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())
    return h.hexdigest()


def contour_paths(grid: DensityGrid, levels) -> list[tuple[ContourLevel, np.ndarray]]:
    """Marching squares on the log-density field; vertices as (x, y) pixel indices."""
    p = grid.to_probability().values
    floor = p[p > 0].min() if (p > 0).any() else 1e-300
    logp = np.log(np.maximum(p, floor * 1e-3))
    out = []
    for lv in levels:
        for c in find_contours(logp, math.log(lv.level)):
            out.append((lv, c[:, ::-1]))
    return out


def _heat_layer(stim: np.ndarray, heat: np.ndarray, config: VizConfig) -> np.ndarray:
    cmap = colormaps[config.colormap]
    color = cmap(heat)[..., :3] * 255.0
    alpha = (config.opacity * heat)[..., None]
    return stim * (1 - alpha) + color * alpha


def render_overlay(stimulus, grid: DensityGrid, config: VizConfig = VizConfig()) -> RenderedFigure:
    stim_img = _load_stimulus(stimulus)
    if stim_img.size != (grid.width, grid.height):
        raise ValidationError(f"stimulus is {stim_img.size[0]}x{stim_img.size[1]}, density is {grid.width}x{grid.height}")
    grid = grid.to_probability()
    stim = np.asarray(stim_img, dtype=np.float64)
    heat = saturating_map(grid, config.saturation) / config.saturation
    rgb = np.rint(np.clip(_heat_layer(stim, heat, config), 0, 255)).astype(np.uint8)
    img = Image.fromarray(rgb, "RGB")
    draw = ImageDraw.Draw(img)
    metadata = {
        "saturation": f"{config.saturation:g}",
        "gamma": f"{config.gamma:g}",
        "density_sha256": grid_hash(grid),
    }
    if is_uniform(grid):
        metadata["caption"] = UNIFORM_CAPTION
        draw.text((4, 4), "~ uniform", fill=config.line_color)
        n_paths = 0
    else:
        levels = contour_levels(grid, config.gamma)
        paths = contour_paths(grid, levels)
        for lv, xy in paths:
            width = config.thick_width if lv.thick else config.thin_width
            draw.line([tuple(v) for v in xy.tolist()], fill=config.line_color, width=width)
        metadata["levels"] = ",".join(str(lv.k) for lv in levels)
        n_paths = len(paths)
    metadata["contour_paths"] = str(n_paths)
    return RenderedFigure(img, metadata)


def _quantile_thresholds(p: np.ndarray, masses=(0.25, 0.5, 0.75)) -> list[float]:
    # density thresholds whose superlevel sets hold the given probability mass
    v = np.sort(p.ravel())[::-1]
    cum = np.cumsum(v)
    return [float(v[min(np.searchsorted(cum, m), v.size - 1)]) for m in masses]


def render_panel(stimulus, grid: DensityGrid, config: VizConfig = VizConfig(), shared_max_ratio: float = 20.0) -> RenderedFigure:
    """Four columns: per-image heatmap, shared-scale heatmap, quantile contours, saturating overlay."""
    stim_img = _load_stimulus(stimulus)
    if stim_img.size != (grid.width, grid.height):
        raise ValidationError("stimulus and density differ in size")
    grid = grid.to_probability()
    p = grid.values
    stim = np.asarray(stim_img, dtype=np.float64)
    per_image = _heat_layer(stim, p / p.max(), config)
    shared = _heat_layer(stim, np.clip(density_ratio(grid) / shared_max_ratio, 0, 1), config)
    panels = [Image.fromarray(np.rint(np.clip(a, 0, 255)).astype(np.uint8), "RGB") for a in (per_image, shared)]
    quant = stim_img.copy()
    draw = ImageDraw.Draw(quant)
    for t in _quantile_thresholds(p):
        if p.min() < t < p.max():
            for c in find_contours(p, t):
                draw.line([tuple(v) for v in c[:, ::-1].tolist()], fill=config.line_color, width=config.thin_width)
    panels.append(quant)
    panels.append(render_overlay(stim_img, grid, config).image)
    w, h = stim_img.size
    out = Image.new("RGB", (4 * w, h), (255, 255, 255))
    for i, panel in enumerate(panels):
        out.paste(panel, (i * w, 0))
    return RenderedFigure(out, {"panel": "per-image,shared-scale,quantile-contours,saturating", "density_sha256": grid_hash(grid)})
