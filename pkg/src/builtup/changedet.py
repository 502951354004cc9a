"""Two-date growth detection: volume-proxy deltas, a nearest-rank p95 threshold and
8-connected pixel-edge polygons.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .grid import GridSpec
from .raster import QuadRaster

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class GrowthField:
    delta: np.ndarray
    spec: GridSpec
    nodata: float = -1e30

    @property
    def valid(self) -> np.ndarray:
        return self.delta != np.float32(self.nodata)


def volume_delta(d0: QuadRaster, h0: QuadRaster, d1: QuadRaster, h1: QuadRaster) -> GrowthField:
    """Per-pixel change in density x height (meters), later minus earlier.

    Cells nodata in any input are nodata in the output.
    """
    layers = (d0, h0, d1, h1)
    if any(r.spec != d0.spec for r in layers[1:]):
        raise ValueError("density/height grids are not aligned")
    bad = np.zeros(d0.spec.shape, dtype=bool)
    for r in layers:
        bad |= r.data[0] == np.float32(r.nodata)
    before = d0.data[0].astype(np.float64) * h0.data[0]
    after = d1.data[0].astype(np.float64) * h1.data[0]
    nodata = GrowthField.nodata
    delta = np.where(bad, nodata, after - before).astype(np.float32)
    return GrowthField(delta, d0.spec, nodata)


class GrowthMask(NamedTuple):
    mask: np.ndarray
    threshold: float
    n_positive: int

    @property
    def empty(self) -> bool:
        return self.n_positive == 0


def nearest_rank(sorted_values: np.ndarray, pct: float) -> float:
    """Order statistic at rank ceil(pct/100 * N) (1-based) of an ascending sample."""
    n = len(sorted_values)
    rank = max(1, -(-round(pct * 100) * n // 10000))
    return float(sorted_values[rank - 1])


def growth_mask_p95(field: GrowthField, pct: float = 95.0) -> GrowthMask:
    """Cells whose positive delta reaches the nearest-rank ``pct`` percentile of all
    positive deltas. Zero and negative changes are never selected."""
    pos = field.valid & (field.delta > 0)
    vals = np.sort(field.delta[pos])
    if vals.size == 0:
        return GrowthMask(np.zeros(field.delta.shape, dtype=bool), float("nan"), 0)
    thr = nearest_rank(vals, pct)
    return GrowthMask(pos & (field.delta >= np.float32(thr)), thr, int(vals.size))


@dataclass
class ChangePolygon:
    exterior: list[tuple[float, float]]
    interiors: list[list[tuple[float, float]]]
    area: float
    pixel_count: int
    delta_sum: float = 0.0

    def to_feature(self) -> dict:
        return {
            "type": "Feature",
            "geometry": {
                "type": "Polygon",
                "coordinates": [[list(p) for p in ring] for ring in [self.exterior, *self.interiors]],
            },
            "properties": {
                "pixel_count": self.pixel_count,
                "area_m2": self.area,
                "delta_sum": self.delta_sum,
            },
        }


# Directions in (col, up) vertex space, counterclockwise order.
_E, _N, _W, _S = (1, 0), (0, 1), (-1, 0), (0, -1)
_RIGHT_OF = {_E: _S, _S: _W, _W: _N, _N: _E}


def _boundary_edges(comp: np.ndarray) -> dict[tuple[int, int], list[tuple[int, int]]]:
    """Directed unit edges with the component on their left, keyed by start vertex.

    Vertex coordinates are (col, -row) so that counterclockwise means the same
    thing on screen and in map space.
    """
    p = np.pad(comp, 1)
    core = p[1:-1, 1:-1]
    out: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def add(mask, start_off, direction):
        rr, cc = np.nonzero(mask)
        for r, c in zip(rr.tolist(), cc.tolist()):
            start = (c + start_off[0], -(r + start_off[1]))
            out.setdefault(start, []).append(direction)

    add(core & ~p[2:, 1:-1], (0, 1), _E)  # south side, bottom-left -> bottom-right
    add(core & ~p[1:-1, 2:], (1, 1), _N)  # east side, bottom-right -> top-right
    add(core & ~p[:-2, 1:-1], (1, 0), _W)  # north side, top-right -> top-left
    add(core & ~p[1:-1, :-2], (0, 0), _S)  # west side, top-left -> bottom-left
    return out


def _trace_rings(edges: dict[tuple[int, int], list[tuple[int, int]]]) -> list[list[tuple[int, int]]]:
    rings = []
    while edges:
        start = min(edges)
        pos, heading = start, None
        ring = [start]
        while True:
            outs = edges[pos]
            if heading is not None and _RIGHT_OF[heading] in outs:
                # At a pinch between diagonal pixels the right turn keeps the
                # 8-connected pixels inside one ring.
                d = _RIGHT_OF[heading]
            elif heading is not None and heading in outs:
                d = heading
            else:
                d = outs[0]
            outs.remove(d)
            if not outs:
                del edges[pos]
            pos = (pos[0] + d[0], pos[1] + d[1])
            heading = d
            ring.append(pos)
            if pos == start:
                break
        rings.append(_drop_collinear(ring))
    return rings


def _drop_collinear(ring: list[tuple[int, int]]) -> list[tuple[int, int]]:
    pts = ring[:-1]
    n = len(pts)
    keep = []
    for i in range(n):
        a, b, c = pts[i - 1], pts[i], pts[(i + 1) % n]
        if (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]) != 0:
            keep.append(b)
    keep.append(keep[0])
    return keep


def ring_area2(ring) -> float:
    """Twice the signed shoelace area (positive for counterclockwise)."""
    return sum(x0 * y1 - x1 * y0 for (x0, y0), (x1, y1) in zip(ring[:-1], ring[1:]))


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)
    return labels, int(n)


def vectorize_8conn(mask: np.ndarray, spec: GridSpec, values: np.ndarray | None = None) -> list[ChangePolygon]:
    """One polygon per 8-connected component, traced along pixel edges.

    Rings are closed, exteriors counterclockwise and holes clockwise, in map
    coordinates of ``spec``. ``values`` (e.g. the growth delta) is summed per
    component into ``delta_sum``.
    """
    labels, n = label_components(mask)
    polys = []
    ps = spec.pixel_size
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        comp = labels[sl] == idx
        r_off, c_off = sl[0].start, sl[1].start
        rings = _trace_rings(_boundary_edges(comp))
        shells = [r for r in rings if ring_area2(r) > 0]
        holes = [r for r in rings if ring_area2(r) < 0]
        if len(shells) != 1:
            raise RuntimeError(f"component {idx} traced to {len(shells)} exterior rings")

        def to_map(ring):
            return [
                (spec.origin_x + (c + c_off) * ps, spec.origin_y + (y - r_off) * ps) for c, y in ring
            ]

        count = int(comp.sum())
        dsum = float(np.sum(values[sl][comp], dtype=np.float64)) if values is not None else 0.0
        polys.append(
            ChangePolygon(
                to_map(shells[0]),
                [to_map(h) for h in holes],
                count * ps * ps,
                count,
                dsum,
            )
        )
    return polys


def polygon_area(poly: ChangePolygon) -> float:
    """Shoelace area from the map-space rings (exterior minus holes)."""
    a = ring_area2(poly.exterior)
    for h in poly.interiors:
        a += ring_area2(h)
    return abs(a) / 2.0


def to_geojson(polys: list[ChangePolygon]) -> dict:
    return {
        "type": "FeatureCollection",
        "crs": {"type": "name", "properties": {"name": "urn:ogc:def:crs:EPSG::3857"}},
        "features": [p.to_feature() for p in polys],
    }


def write_geojson(polys: list[ChangePolygon], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_geojson(polys), fh)
