"""Georeferenced float32 rasters: container type, file formats, mosaicking, resampling.

Two on-disk formats are supported:

* GeoTIFF (``.tif``/``.tiff``): 256x256 internal tiles, DEFLATE, float32,
  one plane per band, EPSG:3857 or EPSG:4326 geokeys, ``GDAL_NODATA`` tag.
* TGRD (``.tgrd``): a flat little-endian container used for fixtures::

      magic    4s   b"TGRD"
      width    u32
      height   u32
      bands    u32
      pixel    f64  pixel size
      origin_x f64  left edge
      origin_y f64  top edge
      crs      u32  EPSG code
      nodata   f32
      payload  f32 * bands * height * width, band-major then row-major
"""

from __future__ import annotations

import dataclasses
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tifffile

from . import projection
from .grid import GeoBox, GridSpec

SUPPORTED_CRS = {"EPSG:3857": 3857, "EPSG:4326": 4326}
DEFAULT_NODATA = -1.0
TILE_SIZE = 256

_TGRD_HEADER = struct.Struct("<4sIIIdddIf")
_TGRD_MAGIC = b"TGRD"

# GeoTIFF tag and key ids
_TAG_PIXEL_SCALE = 33550
_TAG_TIEPOINT = 33922
_TAG_GEOKEYS = 34735
_TAG_GDAL_NODATA = 42113
_KEY_MODEL_TYPE = 1024
_KEY_RASTER_TYPE = 1025
_KEY_GEOGRAPHIC_CS = 2048
_KEY_PROJECTED_CS = 3072


class RasterFormatError(ValueError):
    """Unreadable or corrupt raster file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedCRSError(ValueError):
    pass


@dataclass
class QuadRaster:
    """A float32 grid of shape ``(bands, height, width)`` on a north-up GridSpec."""

    spec: GridSpec
    data: np.ndarray
    nodata: float = DEFAULT_NODATA
    crs: str = "EPSG:3857"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[np.newaxis]
        if data.ndim != 3:
            raise ValueError(f"raster data must be 2-D or 3-D, got shape {data.shape}")
        if data.shape[0] < 1:
            raise ValueError("raster needs at least one band")
        if data.shape[1:] != self.spec.shape:
            raise ValueError(f"data shape {data.shape[1:]} does not match grid {self.spec.shape}")
        if self.crs not in SUPPORTED_CRS:
            raise UnsupportedCRSError(f"unsupported CRS {self.crs!r}")
        self.data = data.astype(np.float32, copy=False)
        self.nodata = float(np.float32(self.nodata))

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.spec.width

    @property
    def height(self) -> int:
        return self.spec.height

    def band(self, i: int) -> np.ndarray:
        """Zero-based band view."""
        return self.data[i]

    def valid_mask(self, i: int = 0) -> np.ndarray:
        return self.data[i] != np.float32(self.nodata)

    def with_data(self, data: np.ndarray) -> "QuadRaster":
        return dataclasses.replace(self, data=data)


@dataclass(frozen=True)
class TileFootprint:
    id: str
    box: GeoBox
    source: str = ""


# -- file I/O ---------------------------------------------------------------


def _fmt_for(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix in (".tif", ".tiff"):
        return "tif"
    if suffix == ".tgrd":
        return "tgrd"
    raise ValueError(f"cannot infer raster format from {path.name!r}")


def write_raster(r: QuadRaster, path: str | os.PathLike) -> Path:
    """Write ``r`` atomically (temp file + rename)."""
    path = Path(path)
    fmt = _fmt_for(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        if fmt == "tgrd":
            _write_tgrd(r, fh)
        else:
            _write_geotiff(r, fh)
    os.replace(tmp, path)
    return path


def read_raster(path: str | os.PathLike) -> QuadRaster:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == _TGRD_MAGIC:
        return _read_tgrd(path)
    if head in (b"II*\x00", b"MM\x00*", b"II+\x00", b"MM\x00+"):
        return _read_geotiff(path)
    raise RasterFormatError(f"{path.name}: unrecognised magic bytes {head!r}", offset=0)


def _write_tgrd(r: QuadRaster, fh) -> None:
    fh.write(
        _TGRD_HEADER.pack(
            _TGRD_MAGIC,
            r.width,
            r.height,
            r.bands,
            r.spec.pixel_size,
            r.spec.origin_x,
            r.spec.origin_y,
            SUPPORTED_CRS[r.crs],
            r.nodata,
        )
    )
    fh.write(np.ascontiguousarray(r.data, dtype="<f4").tobytes())


def _read_tgrd(path: Path) -> QuadRaster:
    buf = path.read_bytes()
    if len(buf) < _TGRD_HEADER.size:
        raise RasterFormatError(f"{path.name}: truncated TGRD header", offset=len(buf))
    magic, w, h, b, px, ox, oy, code, nodata = _TGRD_HEADER.unpack_from(buf)
    crs = _crs_from_code(code)
    expected = _TGRD_HEADER.size + 4 * w * h * b
    if len(buf) != expected:
        raise RasterFormatError(
            f"{path.name}: payload size mismatch, expected {expected} bytes, found {len(buf)}",
            offset=min(len(buf), expected),
        )
    data = np.frombuffer(buf, dtype="<f4", offset=_TGRD_HEADER.size).reshape(b, h, w)
    try:
        spec = GridSpec(ox, oy, px, w, h)
    except ValueError as exc:
        raise RasterFormatError(f"{path.name}: invalid header: {exc}", offset=4) from exc
    return QuadRaster(spec, data.astype(np.float32), nodata, crs)


def _crs_from_code(code: int) -> str:
    for name, c in SUPPORTED_CRS.items():
        if c == code:
            return name
    raise UnsupportedCRSError(f"unsupported CRS EPSG:{code}")


def _geokeys(crs: str) -> tuple[int, ...]:
    code = SUPPORTED_CRS[crs]
    if code == 4326:
        model, cs_key = 2, _KEY_GEOGRAPHIC_CS
    else:
        model, cs_key = 1, _KEY_PROJECTED_CS
    return (
        1, 1, 0, 3,
        _KEY_MODEL_TYPE, 0, 1, model,
        _KEY_RASTER_TYPE, 0, 1, 1,
        cs_key, 0, 1, code,
    )  # fmt: skip


def _write_geotiff(r: QuadRaster, fh) -> None:
    s = r.spec
    extratags = [
        (_TAG_PIXEL_SCALE, "d", 3, (s.pixel_size, s.pixel_size, 0.0), True),
        (_TAG_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, s.origin_x, s.origin_y, 0.0), True),
        (_TAG_GEOKEYS, "H", 16, _geokeys(r.crs), True),
        (_TAG_GDAL_NODATA, "s", 0, repr(r.nodata), True),
    ]
    data = np.ascontiguousarray(r.data, dtype="<f4")
    single = r.bands == 1
    tifffile.imwrite(
        fh,
        data[0] if single else data,
        byteorder="<",
        photometric="minisblack",
        planarconfig=None if single else "separate",
        tile=(TILE_SIZE, TILE_SIZE),
        compression="zlib",
        software=False,
        metadata=None,
        extratags=extratags,
    )


def _read_geotiff(path: Path) -> QuadRaster:
    size = path.stat().st_size
    try:
        with tifffile.TiffFile(path) as tif:
            page = tif.pages[0]
            for off, cnt in zip(page.dataoffsets, page.databytecounts):
                if off + cnt > size:
                    raise RasterFormatError(
                        f"{path.name}: tile data extends past end of file ({size} bytes)",
                        offset=off,
                    )
            tags = page.tags
            missing = [t for t in (_TAG_PIXEL_SCALE, _TAG_TIEPOINT, _TAG_GEOKEYS) if t not in tags]
            if missing:
                raise RasterFormatError(f"{path.name}: missing GeoTIFF tags {missing}")
            crs = _crs_from_geokeys(tags[_TAG_GEOKEYS].value)
            sx, sy, _ = tags[_TAG_PIXEL_SCALE].value
            if not math.isclose(sx, sy, rel_tol=1e-12):
                raise RasterFormatError(f"{path.name}: non-square pixels ({sx}, {sy})")
            tie = tags[_TAG_TIEPOINT].value
            nodata = float(tags[_TAG_GDAL_NODATA].value) if _TAG_GDAL_NODATA in tags else DEFAULT_NODATA
            data = page.asarray()
    except (tifffile.TiffFileError, struct.error, OSError, ValueError) as exc:
        if isinstance(exc, (RasterFormatError, UnsupportedCRSError)):
            raise
        raise RasterFormatError(f"{path.name}: {exc}", offset=getattr(exc, "offset", None)) from exc
    if data.dtype != np.float32:
        raise RasterFormatError(f"{path.name}: expected float32 samples, found {data.dtype}")
    if data.ndim == 2:
        data = data[np.newaxis]
    spec = GridSpec(tie[3] - tie[0] * sx, tie[4] + tie[1] * sy, sx, data.shape[2], data.shape[1])
    return QuadRaster(spec, data, nodata, crs)


def _crs_from_geokeys(keys) -> str:
    keys = tuple(int(k) for k in keys)
    n = keys[3]
    entries = {keys[4 + 4 * i]: keys[4 + 4 * i + 3] for i in range(n)}
    code = entries.get(_KEY_PROJECTED_CS) or entries.get(_KEY_GEOGRAPHIC_CS)
    if code is None:
        raise UnsupportedCRSError("GeoTIFF has no EPSG code in its geokeys")
    return _crs_from_code(code)


# -- mosaicking and resampling ----------------------------------------------


def _index_along(coords: np.ndarray, start: float, step: float, n: int) -> np.ndarray:
    idx = np.floor((coords - start) / step).astype(np.int64)
    idx[(idx < 0) | (idx >= n)] = -1
    return idx


def merge_crop(tiles: list[QuadRaster], target: GeoBox, pixel_size: float | None = None) -> QuadRaster:
    """Mosaic ``tiles`` onto a grid covering ``target`` exactly.

    The output pixel size is the finest among the inputs unless given. Each output
    cell takes the value of the tile cell containing its center; where tiles
    overlap the later tile wins on its non-nodata cells. Uncovered cells are nodata.
    """
    if not tiles:
        raise ValueError("merge_crop needs at least one tile")
    first = tiles[0]
    for t in tiles[1:]:
        if (t.crs, t.bands, t.nodata) != (first.crs, first.bands, first.nodata):
            raise ValueError("tiles must share CRS, band count and nodata")
    ps = pixel_size or min(t.spec.pixel_size for t in tiles)
    spec = GridSpec(
        target.min_x,
        target.max_y,
        ps,
        max(1, round(target.width / ps)),
        max(1, round(target.height / ps)),
    )
    out = np.full((first.bands, spec.height, spec.width), first.nodata, dtype=np.float32)
    xs, ys = spec.cell_centers()
    nd = np.float32(first.nodata)
    for t in tiles:
        cols = _index_along(xs, t.spec.origin_x, t.spec.pixel_size, t.width)
        rows = _index_along(-ys, -t.spec.origin_y, t.spec.pixel_size, t.height)
        oc = np.nonzero(cols >= 0)[0]
        orr = np.nonzero(rows >= 0)[0]
        if oc.size == 0 or orr.size == 0:
            continue
        patch = t.data[:, rows[orr][:, None], cols[oc][None, :]]
        region = out[:, orr[:, None], oc[None, :]]
        out[:, orr[:, None], oc[None, :]] = np.where(patch != nd, patch, region)
    return QuadRaster(spec, out, first.nodata, first.crs)


def _axis_weights(frac: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower index, upper index and upper weight for fractional cell positions."""
    frac = np.clip(frac, 0.0, n - 1)
    near = np.rint(frac)
    frac = np.where(np.abs(frac - near) < 1e-9, near, frac)
    lo = np.floor(frac).astype(np.int64)
    w = frac - lo
    hi = np.minimum(lo + 1, n - 1)
    return lo, hi, w


def _source_coords(out: GridSpec, out_crs: str, src_crs: str):
    xs, ys = out.cell_centers()
    if out_crs == src_crs:
        return xs[None, :], ys[:, None]
    X, Y = np.meshgrid(xs, ys)
    if src_crs == "EPSG:4326":
        return projection.inverse(X, Y)
    X = np.clip(X, -180.0, 180.0)
    Y = np.clip(Y, -projection.MAX_LATITUDE + 1e-9, projection.MAX_LATITUDE - 1e-9)
    return projection.forward(X, Y)


def resample_bilinear(r: QuadRaster, out: GridSpec, out_crs: str | None = None) -> QuadRaster:
    """Bilinear resampling of ``r`` onto ``out``.

    Output cell centers outside the source extent are nodata. Inside it, the value
    interpolates the four surrounding source cell centers (clamped at the border);
    any contributing neighbor with nonzero weight that is nodata makes the output
    nodata. Only the EPSG:3857 <-> EPSG:4326 pair is supported across CRSs.
    """
    out_crs = out_crs or r.crs
    if out_crs not in SUPPORTED_CRS:
        raise UnsupportedCRSError(f"unsupported CRS {out_crs!r}")
    if out == r.spec and out_crs == r.crs:
        return QuadRaster(out, r.data.copy(), r.nodata, r.crs)
    sx, sy = _source_coords(out, out_crs, r.crs)
    s = r.spec
    b = s.bounds
    inside = (sx >= b.min_x) & (sx < b.max_x) & (sy > b.min_y) & (sy <= b.max_y)
    c0, c1, wx = _axis_weights((sx - s.origin_x) / s.pixel_size - 0.5, s.width)
    r0, r1, wy = _axis_weights((s.origin_y - sy) / s.pixel_size - 0.5, s.height)
    nd = np.float32(r.nodata)
    result = np.empty((r.bands, out.height, out.width), dtype=np.float32)
    for i in range(r.bands):
        band = r.data[i]
        v00, v01 = band[r0, c0], band[r0, c1]
        v10, v11 = band[r1, c0], band[r1, c1]
        bad = (
            (v00 == nd)
            | ((v01 == nd) & (wx > 0))
            | ((v10 == nd) & (wy > 0))
            | ((v11 == nd) & (wx > 0) & (wy > 0))
        )
        a00 = v00.astype(np.float64)
        a01 = v01.astype(np.float64)
        a10 = v10.astype(np.float64)
        a11 = v11.astype(np.float64)
        val = (a00 * (1 - wx) + a01 * wx) * (1 - wy) + (a10 * (1 - wx) + a11 * wx) * wy
        val = np.where(bad | ~inside, r.nodata, val)
        result[i] = np.broadcast_to(val, (out.height, out.width))
    return QuadRaster(out, result, r.nodata, out_crs)


def footprint(r: QuadRaster, id: str, source: str = "") -> TileFootprint:
    return TileFootprint(id, r.spec.bounds, source)
