"""Web Mercator quad grid: identifiers, bounds, point lookup and block averaging.

The global basemap grid is 2048 x 2048 quads of 4096 x 4096 zoom-15 pixels.
Row 0 sits at the northern map edge, column 0 at the antimeridian.
"""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .projection import ORIGIN_SHIFT, forward

if TYPE_CHECKING:
    from .raster import QuadRaster

QUADS_PER_AXIS = 2048
QUAD_PIXELS = 4096
OUTPUT_PIXELS = 512
POOL_FACTOR = QUAD_PIXELS // OUTPUT_PIXELS
PIXEL_SIZE = 2.0 * ORIGIN_SHIFT / 2**23  # zoom-15 pixel, ~4.777 m
QUAD_SPAN = QUAD_PIXELS * PIXEL_SIZE

_QUAD_RE = re.compile(r"^L15-(\d{4})E-(\d{4})N$")


class QuadIdError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class QuadId:
    x: int
    y: int

    def __post_init__(self):
        for axis, v in (("x", self.x), ("y", self.y)):
            if not 0 <= v < QUADS_PER_AXIS:
                raise QuadIdError(f"quad {axis}={v} outside [0, {QUADS_PER_AXIS})")

    @property
    def name(self) -> str:
        return format_quad_id(self)

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class GeoBox:
    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self):
        if not (self.min_x < self.max_x and self.min_y < self.max_y):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.max_x - self.min_x

    @property
    def height(self) -> float:
        return self.max_y - self.min_y

    def contains(self, x: float, y: float) -> bool:
        """Half-open containment in grid-index order.

        Columns run east from ``min_x`` and rows run south from ``max_y``, so a
        point is inside when ``min_x <= x < max_x`` and ``min_y < y <= max_y``.
        """
        return self.min_x <= x < self.max_x and self.min_y < y <= self.max_y

    def overlap_area(self, other: "GeoBox") -> float:
        w = min(self.max_x, other.max_x) - max(self.min_x, other.min_x)
        h = min(self.max_y, other.max_y) - max(self.min_y, other.min_y)
        return w * h if w > 0 and h > 0 else 0.0

    def intersects(self, other: "GeoBox") -> bool:
        return self.overlap_area(other) > 0


@dataclass(frozen=True)
class GridSpec:
    """North-up pixel grid. ``origin_x``/``origin_y`` is the top-left corner."""

    origin_x: float
    origin_y: float
    pixel_size: float
    width: int
    height: int

    def __post_init__(self):
        if not self.pixel_size > 0:
            raise ValueError(f"pixel_size must be > 0, got {self.pixel_size}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"grid dimensions must be positive, got {self.width}x{self.height}")

    @property
    def bounds(self) -> GeoBox:
        return GeoBox(
            self.origin_x,
            self.origin_y - self.height * self.pixel_size,
            self.origin_x + self.width * self.pixel_size,
            self.origin_y,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def scaled(self, factor: int) -> "GridSpec":
        """Coarsen by an integer factor, keeping the origin."""
        return GridSpec(
            self.origin_x,
            self.origin_y,
            self.pixel_size * factor,
            self.width // factor,
            self.height // factor,
        )

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.origin_x + (np.arange(self.width) + 0.5) * self.pixel_size
        ys = self.origin_y - (np.arange(self.height) + 0.5) * self.pixel_size
        return xs, ys


def format_quad_id(q: QuadId) -> str:
    return f"L15-{q.x:04d}E-{q.y:04d}N"


def parse_quad_id(name: str) -> QuadId:
    m = _QUAD_RE.match(name)
    if m is None:
        parts = name.split("-")
        bad = next(
            (
                p
                for p, pat in zip(parts, (r"L15", r"\d{4}E", r"\d{4}N"))
                if not re.fullmatch(pat, p)
            ),
            name if len(parts) != 3 else parts[-1],
        )
        raise QuadIdError(f"malformed quad name {name!r}: bad token {bad!r}")
    return QuadId(int(m.group(1)), int(m.group(2)))


def _edge(i: int) -> float:
    # Shared by both neighbours of an edge so adjacent boxes agree bit-for-bit.
    return -ORIGIN_SHIFT + i * QUAD_SPAN


def quad_bounds(q: QuadId) -> GeoBox:
    return GeoBox(_edge(q.x), -_edge(q.y + 1), _edge(q.x + 1), -_edge(q.y))


def quad_grid(q: QuadId, pixels: int = QUAD_PIXELS) -> GridSpec:
    """Grid of ``pixels`` x ``pixels`` cells covering quad ``q``."""
    b = quad_bounds(q)
    return GridSpec(b.min_x, b.max_y, QUAD_SPAN / pixels, pixels, pixels)


def quad_for_point(lon: float, lat: float) -> QuadId:
    if lon == 180.0:
        lon = -180.0
    if not -180.0 <= lon < 180.0:
        raise ValueError(f"longitude {lon} outside [-180, 180)")
    x, y = forward(lon, lat)
    col = min(max(math.floor((x + ORIGIN_SHIFT) / QUAD_SPAN), 0), QUADS_PER_AXIS - 1)
    row = min(max(math.floor((ORIGIN_SHIFT - y) / QUAD_SPAN), 0), QUADS_PER_AXIS - 1)
    # floor() can land one cell off near edges; settle against the exact edges.
    while col > 0 and x < _edge(col):
        col -= 1
    while col < QUADS_PER_AXIS - 1 and x >= _edge(col + 1):
        col += 1
    while row > 0 and y > -_edge(row):
        row -= 1
    while row < QUADS_PER_AXIS - 1 and y <= -_edge(row + 1):
        row += 1
    return QuadId(col, row)


def downsample_average(r: "QuadRaster", factor: int, nodata: float | None = None) -> "QuadRaster":
    """Block-mean downsampling that ignores nodata cells.

    A block with no valid cells becomes nodata. Sums are accumulated in float64.
    """
    nodata = r.nodata if nodata is None else nodata
    bands, h, w = r.data.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"raster {h}x{w} not divisible by factor {factor}")
    blocks = r.data.reshape(bands, h // factor, factor, w // factor, factor).astype(np.float64)
    valid = blocks != np.float32(nodata)
    sums = np.where(valid, blocks, 0.0).sum(axis=(2, 4))
    counts = valid.sum(axis=(2, 4))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(counts > 0, sums / np.maximum(counts, 1), nodata)
    return dataclasses.replace(
        r, spec=r.spec.scaled(factor), data=out.astype(np.float32), nodata=float(np.float32(nodata))
    )
