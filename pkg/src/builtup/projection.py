"""Spherical Mercator (EPSG:3857) <-> WGS84 (EPSG:4326) closed-form transforms."""

from __future__ import annotations

import math

import numpy as np

EARTH_RADIUS = 6378137.0
ORIGIN_SHIFT = math.pi * EARTH_RADIUS  # 20037508.342789244
MAX_LATITUDE = 85.0511287798066


class DomainError(ValueError):
    """Coordinate outside the valid Web Mercator domain."""


def forward(lon, lat):
    """Project lon/lat degrees to Web Mercator meters. Works on scalars and arrays."""
    lat_arr = np.asarray(lat, dtype=np.float64)
    if np.any(~(np.abs(lat_arr) < MAX_LATITUDE)):
        raise DomainError(f"latitude outside Mercator range (|lat| < {MAX_LATITUDE})")
    lon_arr = np.asarray(lon, dtype=np.float64)
    x = lon_arr * ORIGIN_SHIFT / 180.0
    # artanh(sin) is the same curve as log(tan(pi/4 + lat/2)) but exact at the equator
    y = EARTH_RADIUS * np.arctanh(np.sin(np.radians(lat_arr)))
    if np.ndim(x) == 0 and np.ndim(y) == 0:
        return float(x), float(y)
    return x, y


def inverse(x, y):
    """Web Mercator meters back to lon/lat degrees."""
    x_arr = np.asarray(x, dtype=np.float64)
    y_arr = np.asarray(y, dtype=np.float64)
    lim = ORIGIN_SHIFT * (1 + 1e-12)
    if np.any(np.abs(x_arr) > lim) or np.any(np.abs(y_arr) > lim):
        raise DomainError("coordinates outside the Web Mercator extent")
    lon = x_arr * 180.0 / ORIGIN_SHIFT
    lat = np.degrees(np.arctan(np.sinh(y_arr / EARTH_RADIUS)))
    if np.ndim(lon) == 0 and np.ndim(lat) == 0:
        return float(lon), float(lat)
    return lon, lat


def project(a, b, direction: str = "forward"):
    """Dispatch to :func:`forward` (lon, lat -> x, y) or :func:`inverse`."""
    if direction == "forward":
        return forward(a, b)
    if direction == "inverse":
        return inverse(a, b)
    raise ValueError(f"unknown direction {direction!r}")
