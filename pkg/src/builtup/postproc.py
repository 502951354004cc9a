"""Quarterly prediction smoothing: clarity scores, four-quarter voting, masking, agreement.

Pipeline order for one quad and quarter t: clarity(t) -> rolling_aggregate over
t-3..t for density and height -> mask_uninhabitable -> enforce_agreement.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import POOL_FACTOR, GridSpec, downsample_average
from .raster import QuadRaster

DENSITY_FLOOR = 2.0 / 255.0
CLARITY_SPLIT = 3.5
CONF_THRESHOLD = 95.0
ELEVATION_CAP_M = 5100.0
MIN_HEIGHT_M = 2.4
WATER_TRANSITIONS = frozenset({1, 2, 4, 5, 7, 8})


class UdmClass(enum.IntEnum):
    CLEAR = 0
    CLOUD = 1
    HAZE = 2
    SHADOW = 3
    SNOW = 4
    MISSING = 5


@dataclass
class UdmQuad:
    clazz: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.clazz = np.asarray(self.clazz)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.clazz.shape != self.confidence.shape:
            raise ValueError("UDM class and confidence grids differ in shape")
        codes = np.unique(self.clazz)
        bad = set(codes.tolist()) - {int(c) for c in UdmClass}
        if bad:
            raise ValueError(f"unknown UDM class codes {sorted(bad)}")

    @classmethod
    def from_raster(cls, r: QuadRaster) -> "UdmQuad":
        """Band 1 class code, band 2 confidence percent."""
        return cls(r.data[0].astype(np.uint8), r.data[1])


@dataclass
class MaskLayers:
    gsw_transitions: np.ndarray
    dem: np.ndarray


@dataclass
class TimeSeriesStack:
    """Four chronologically ordered quarters (t-3 ... t) and clarity for quarter t."""

    quarters: Sequence[QuadRaster]
    clarity: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.quarters) != 4:
            raise ValueError(f"need exactly 4 quarters, got {len(self.quarters)}")
        spec = self.quarters[0].spec
        if any(q.spec != spec for q in self.quarters[1:]):
            raise ValueError("quarters do not share a grid")
        if self.clarity is not None and np.shape(self.clarity) != spec.shape:
            raise ValueError(f"clarity shape {np.shape(self.clarity)} does not match grid {spec.shape}")


def clarity_scores(udm: UdmQuad, conf_threshold: float = CONF_THRESHOLD) -> np.ndarray:
    """Full-resolution integer scores 1-4 (missing pixels count as confident unclear)."""
    clazz = udm.clazz
    conf = np.where(clazz == UdmClass.MISSING, 100.0, udm.confidence)
    clear = clazz == UdmClass.CLEAR
    high = conf > conf_threshold
    return np.select(
        [clear & high, clear & ~high, ~clear & ~high],
        [4, 3, 2],
        default=1,
    ).astype(np.float32)


def clarity_score_quad(
    udm: UdmQuad, conf_threshold: float = CONF_THRESHOLD, factor: int = POOL_FACTOR
) -> np.ndarray:
    """Clarity scores averaged down to the prediction grid."""
    scores = clarity_scores(udm, conf_threshold)
    h, w = scores.shape
    tmp = QuadRaster(GridSpec(0.0, 0.0, 1.0, w, h), scores, nodata=-1.0)
    return downsample_average(tmp, factor).data[0]


def _indicator(values: np.ndarray, kind: str, density_floor: float) -> np.ndarray:
    if kind == "density":
        return values > density_floor
    if kind == "height":
        return values > 0
    raise ValueError(f"kind must be 'density' or 'height', got {kind!r}")


def aggregate_values(
    values: np.ndarray,
    clarity: np.ndarray | None,
    kind: str = "density",
    density_floor: float = DENSITY_FLOOR,
    clarity_split: float = CLARITY_SPLIT,
) -> np.ndarray:
    """Four-quarter vote on a ``(4, ...)`` float64 array.

    Three or more building quarters give the median of the building values, three
    or more empty quarters give 0. A 2-2 split takes the max when clarity is at
    least ``clarity_split``, 0 below it, and the median of all four values when
    clarity is unavailable (NaN or ``None``).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != 4:
        raise ValueError(f"need 4 quarters, got {values.shape[0]}")
    # Building values always exceed non-building ones, so after sorting the
    # building quarters occupy the top of the stack.
    s = np.sort(values, axis=0)
    n_bld = _indicator(values, kind, density_floor).sum(axis=0)
    median_top3 = s[2]
    median_all = (s[1] + s[2]) / 2
    if clarity is None:
        clarity = np.full(values.shape[1:], np.nan)
    clarity = np.asarray(clarity, dtype=np.float64)
    split = np.where(
        clarity >= clarity_split, s[3], np.where(clarity < clarity_split, 0.0, median_all)
    )
    return np.select(
        [n_bld == 4, n_bld == 3, n_bld <= 1],
        [median_all, median_top3, 0.0],
        default=split,
    )


def rolling_aggregate(
    stack: TimeSeriesStack,
    kind: str = "density",
    band: int = 0,
    density_floor: float = DENSITY_FLOOR,
    clarity_split: float = CLARITY_SPLIT,
) -> QuadRaster:
    """Apply the four-quarter vote to one band of ``stack``.

    Nodata quarters count as empty (value 0); a pixel that is nodata in all
    four quarters stays nodata.
    """
    first = stack.quarters[0]
    nd = np.float32(first.nodata)
    raw = np.stack([q.data[band] for q in stack.quarters])
    missing = raw == nd
    values = np.where(missing, 0.0, raw.astype(np.float64))
    out = aggregate_values(values, stack.clarity, kind, density_floor, clarity_split)
    out = np.where(missing.all(axis=0), first.nodata, out)
    return QuadRaster(first.spec, out.astype(np.float32), first.nodata, first.crs)


def uninhabitable_mask(
    m: MaskLayers, elevation_cap_m: float = ELEVATION_CAP_M
) -> np.ndarray:
    gsw = np.asarray(m.gsw_transitions).astype(np.int64)
    return np.isin(gsw, sorted(WATER_TRANSITIONS)) | (np.asarray(m.dem) > elevation_cap_m)


def mask_uninhabitable(
    pred: QuadRaster, m: MaskLayers, elevation_cap_m: float = ELEVATION_CAP_M
) -> QuadRaster:
    """Zero every band where the cell is water or above ``elevation_cap_m``.

    Nodata cells are left as nodata; everything else outside the mask is untouched.
    """
    mask = uninhabitable_mask(m, elevation_cap_m)
    if mask.shape != pred.spec.shape:
        raise ValueError(f"mask grid {mask.shape} does not match prediction {pred.spec.shape}")
    data = pred.data.copy()
    hit = mask[np.newaxis] & (data != np.float32(pred.nodata))
    data[hit] = 0.0
    return pred.with_data(data)


def agreement_arrays(
    density: np.ndarray,
    height_m: np.ndarray,
    density_floor: float = DENSITY_FLOOR,
    min_height_m: float = MIN_HEIGHT_M,
) -> tuple[np.ndarray, np.ndarray]:
    """Density/height consistency rules, zero-density annihilation first.

    1. density > 0  -> height >= min_height_m
    2. density == 0 -> height = 0
    3. height > 0   -> density >= density_floor

    One pass reaches the fixpoint: after rules 1-2 positive heights only remain
    where density is already positive, and rule 3 never makes density zero.
    """
    d = np.asarray(density, dtype=np.float64)
    h = np.asarray(height_m, dtype=np.float64)
    h = np.where(d > 0, np.maximum(h, min_height_m), 0.0)
    d = np.where(h > 0, np.maximum(d, density_floor), d)
    return d, h


def enforce_agreement(
    density: QuadRaster,
    height_m: QuadRaster,
    density_floor: float = DENSITY_FLOOR,
    min_height_m: float = MIN_HEIGHT_M,
) -> tuple[QuadRaster, QuadRaster]:
    """Raster wrapper of :func:`agreement_arrays`; cells nodata in either input are kept as is."""
    if density.spec != height_m.spec:
        raise ValueError("density and height grids differ")
    d = density.data[0]
    h = height_m.data[0]
    valid = (d != np.float32(density.nodata)) & (h != np.float32(height_m.nodata))
    d2, h2 = agreement_arrays(d, h, density_floor, min_height_m)
    d_out = np.where(valid, d2.astype(np.float32), d)
    h_out = np.where(valid, h2.astype(np.float32), h)
    return density.with_data(d_out[np.newaxis]), height_m.with_data(h_out[np.newaxis])
