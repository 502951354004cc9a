"""Per-quad training labels from gridded footprint/height sources, and quad-level splits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import projection
from .grid import (
    OUTPUT_PIXELS,
    QUAD_PIXELS,
    GeoBox,
    GridSpec,
    QuadId,
    downsample_average,
    quad_bounds,
    quad_grid,
)
from .raster import QuadRaster, TileFootprint, merge_crop, resample_bilinear

LABEL_NODATA = -1.0
MAX_HEIGHT_M = 100.0


@dataclass
class LabelQuad:
    quad: QuadId
    density: np.ndarray
    height_norm: np.ndarray

    def to_raster(self) -> QuadRaster:
        """Two-band raster: band 1 density, band 2 normalized height, nodata -1."""
        spec = quad_grid(self.quad, self.density.shape[0])
        return QuadRaster(spec, np.stack([self.density, self.height_norm]), LABEL_NODATA)

    @classmethod
    def from_raster(cls, quad: QuadId, r: QuadRaster) -> "LabelQuad":
        return cls(quad, r.data[0].copy(), r.data[1].copy())


def build_quad_index(
    quads: Iterable[QuadId], tiles: Sequence[TileFootprint]
) -> dict[QuadId, list[TileFootprint]]:
    """Map each quad to the tiles whose boxes overlap it with positive area."""
    return {q: [t for t in tiles if quad_bounds(q).intersects(t.box)] for q in quads}


def normalize_height(height: np.ndarray, units: str = "m") -> np.ndarray:
    """Meters -> [0, 1] via clip(h, 0, 100) / 100; pre-normalized input is only clipped."""
    if units == "m":
        return np.clip(height, 0.0, MAX_HEIGHT_M) / MAX_HEIGHT_M
    if units == "norm":
        return np.clip(height, 0.0, 1.0)
    raise ValueError(f"height units must be 'm' or 'norm', got {units!r}")


def _mercator_box(r: QuadRaster) -> GeoBox:
    b = r.spec.bounds
    if r.crs == "EPSG:3857":
        return b
    lat_lim = projection.MAX_LATITUDE - 1e-9
    x0, y0 = projection.forward(max(b.min_x, -180.0), max(b.min_y, -lat_lim))
    x1, y1 = projection.forward(min(b.max_x, 180.0), min(b.max_y, lat_lim))
    return GeoBox(x0, y0, x1, y1)


def _window(grid: GridSpec, box: GeoBox) -> GridSpec | None:
    """Sub-grid of ``grid`` (same alignment) covering ``box``."""
    ps = grid.pixel_size
    c0 = max(0, math.floor((box.min_x - grid.origin_x) / ps))
    c1 = min(grid.width, math.ceil((box.max_x - grid.origin_x) / ps))
    r0 = max(0, math.floor((grid.origin_y - box.max_y) / ps))
    r1 = min(grid.height, math.ceil((grid.origin_y - box.min_y) / ps))
    if c1 <= c0 or r1 <= r0:
        return None
    return GridSpec(grid.origin_x + c0 * ps, grid.origin_y - r0 * ps, ps, c1 - c0, r1 - r0)


def _nearest(r: QuadRaster, out: GridSpec) -> QuadRaster:
    return merge_crop([r], out.bounds, pixel_size=out.pixel_size)


def make_label_quad(
    q: QuadId,
    tiles: Sequence[QuadRaster],
    *,
    height_units: str = "m",
    resampling: str = "bilinear",
    quad_pixels: int = QUAD_PIXELS,
    label_pixels: int = OUTPUT_PIXELS,
) -> LabelQuad:
    """Resample, mosaic and pool 2-band (density, height) source tiles into one label quad.

    Tiles that do not reach the quad are ignored; with none left the label is
    entirely nodata rather than an error.
    """
    if resampling not in ("bilinear", "nearest"):
        raise ValueError(f"unknown resampling {resampling!r}")
    grid = quad_grid(q, quad_pixels)
    qbox = quad_bounds(q)
    placed = []
    for t in tiles:
        if t.bands != 2:
            raise ValueError(f"label source tiles need 2 bands (density, height), got {t.bands}")
        if t.nodata != LABEL_NODATA:
            t = t.with_data(np.where(t.data == np.float32(t.nodata), LABEL_NODATA, t.data))
            t.nodata = LABEL_NODATA
        box = _mercator_box(t)
        if not qbox.intersects(box):
            continue
        win = _window(grid, box)
        if win is None:
            continue
        if resampling == "bilinear" or t.crs != "EPSG:3857":
            placed.append(resample_bilinear(t, win, out_crs="EPSG:3857"))
        else:
            placed.append(_nearest(t, win))
    if not placed:
        empty = np.full((label_pixels, label_pixels), LABEL_NODATA, dtype=np.float32)
        return LabelQuad(q, empty, empty.copy())
    mosaic = merge_crop(placed, qbox, pixel_size=grid.pixel_size)
    pooled = downsample_average(mosaic, quad_pixels // label_pixels, LABEL_NODATA)
    density, height = pooled.data
    valid_d = density != np.float32(LABEL_NODATA)
    valid_h = height != np.float32(LABEL_NODATA)
    density = np.where(valid_d, np.clip(density, 0.0, 1.0), LABEL_NODATA).astype(np.float32)
    height = np.where(valid_h, normalize_height(height, height_units), LABEL_NODATA).astype(np.float32)
    return LabelQuad(q, density, height)


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * n for f in fractions]
    sizes = [math.floor(x) for x in raw]
    short = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:short]:
        sizes[i] += 1
    return sizes


def split_quads(
    quads: Sequence[QuadId],
    fractions: Sequence[float] = (0.98, 0.01, 0.01),
    seed: int = 0,
) -> tuple[list[QuadId], list[QuadId], list[QuadId]]:
    """Shuffle whole quads with ``seed`` and cut into train/val/test by largest remainder."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(quads))
    shuffled = [quads[i] for i in order]
    n_train, n_val, _ = _largest_remainder(len(quads), fractions)
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )
