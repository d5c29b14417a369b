"""PNG export of per-patch attention heatmaps and thresholded intensity overlays."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .attention import PatchGrid
from .errors import ContractError, DimensionError

DEFAULT_PERCENTILE = 60.0


def heat_grid(heat, grid: PatchGrid) -> np.ndarray:
    """Reshape a length-``L`` patch vector to ``(rows, cols)``."""
    h = np.asarray(heat, dtype=np.float64).ravel()
    if h.size != grid.n_patches:
        raise DimensionError(f"{h.size} values for a {grid.rows}x{grid.cols} grid")
    return h.reshape(grid.rows, grid.cols)


def upsample(cells: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour blow-up of a patch grid to ``size x size`` pixels."""
    rows, cols = cells.shape
    if size % rows or size % cols:
        raise DimensionError(f"image size {size} is not a multiple of the {rows}x{cols} grid")
    return np.kron(cells, np.ones((size // rows, size // cols)))


def heat_to_image(heat, grid: PatchGrid, size: int, vmax: float | None = None,
                  colormap: str = "gray") -> np.ndarray:
    """``uint8`` image of a patch heatmap scaled to ``[0, vmax]``.

    ``colormap="gray"`` gives a single-channel image whose pixel values are
    proportional to the heat, so images sharing ``vmax`` can be compared
    pixel-wise; any matplotlib colormap name gives RGB.
    """
    cells = heat_grid(heat, grid)
    top = float(cells.max()) if vmax is None else float(vmax)
    scaled = np.clip(cells / top, 0.0, 1.0) if top > 0 else np.zeros_like(cells)
    pixels = upsample(scaled, size)
    if colormap == "gray":
        return np.round(pixels * 255).astype(np.uint8)
    try:
        cmap = colormaps[colormap]
    except KeyError as exc:
        raise ContractError(f"unknown colormap {colormap!r}") from exc
    return np.round(cmap(pixels)[..., :3] * 255).astype(np.uint8)


def save_png(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(image).save(path, format="PNG", optimize=False)


def save_heatmap(path: str | Path, heat, grid: PatchGrid, size: int, vmax: float | None = None,
                 colormap: str = "gray") -> None:
    save_png(path, heat_to_image(heat, grid, size, vmax, colormap))


def percentile_mask(heat, percentile: float = DEFAULT_PERCENTILE) -> np.ndarray:
    """Patches whose heat is at or above the given percentile of the map."""
    if not 0.0 <= percentile <= 100.0:
        raise ContractError("percentile must lie in [0, 100]")
    h = np.asarray(heat, dtype=np.float64)
    return h >= np.percentile(h, percentile)


def intensity_overlay(frame: np.ndarray, heat, grid: PatchGrid,
                      percentile: float = DEFAULT_PERCENTILE, dim: float = 0.2) -> np.ndarray:
    """Frame with patches below the heat percentile darkened to ``dim`` brightness."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[0] != frame.shape[1]:
        raise DimensionError(f"expected a square H x W x C frame, got {frame.shape}")
    keep = upsample(heat_grid(percentile_mask(heat, percentile), grid).astype(np.float64), frame.shape[0])
    weight = dim + (1.0 - dim) * keep
    return np.round(np.clip(frame * weight[..., None], 0, 1) * 255).astype(np.uint8)


def roi_pixel_mask(mask, grid: PatchGrid, size: int) -> np.ndarray:
    return upsample(heat_grid(np.asarray(mask, dtype=np.float64), grid), size) > 0.5
