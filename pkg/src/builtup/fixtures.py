"""Deterministic synthetic scenes: settlement truth with growth, noisy quarterly
predictions, UDMs with cloud artifacts, and water/elevation mask layers.

All randomness comes from one ``numpy.random.Generator`` seeded by
``SceneSpec.seed``; the draw order below defines the fixture.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import POOL_FACTOR, QuadId, format_quad_id, quad_grid
from .orchestrator import Manifest, WorkItem, shift_quarter
from .postproc import DENSITY_FLOOR, MIN_HEIGHT_M, UdmClass
from .raster import QuadRaster, write_raster

MAX_TRUTH_HEIGHT_M = 30.0


@dataclass
class SceneSpec:
    seed: int = 0
    quads: int = 1
    size: int = 64
    blob_count: int = 6
    blob_radius: tuple[float, float] = (2.0, 6.0)
    density_peak: float = 0.8
    growth_blobs: int = 2
    growth_per_quarter: float = 0.04
    noise_sigma: float = 0.0
    false_positive: float = 0.0
    # (quarter index, dropout fraction, cloud fraction)
    noise_schedule: list[tuple[int, float, float]] = field(default_factory=list)
    cloud_fraction: float = 0.0
    water_fraction: float = 0.1
    high_fraction: float = 0.1
    clear_confidence: tuple[float, float] = (100.0, 100.0)
    first_quarter: str = "2020q1"

    def __post_init__(self):
        fracs = [self.noise_sigma, self.false_positive, self.cloud_fraction, self.water_fraction,
                 self.high_fraction, self.density_peak]
        fracs += [f for _, d, c in self.noise_schedule for f in (d, c)]
        if any(not 0.0 <= f <= 1.0 for f in fracs):
            raise ValueError("scene fractions must lie in [0, 1]")


@dataclass
class Scene:
    quad: QuadId
    quarters: list[str]
    predictions: list[QuadRaster]
    udm: list[QuadRaster]
    gsw: QuadRaster
    dem: QuadRaster
    truth: list[QuadRaster]
    growth_mask: np.ndarray


def _bumps(rng, n: int, size: int, radius: tuple[float, float]) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((size, size))
    for _ in range(n):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(*radius, 2)
        amp = rng.uniform(0.5, 1.0)
        out += amp * np.exp(-0.5 * (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))
    return out


def _corner_mask(size: int, frac: float, corner: str) -> np.ndarray:
    """Axis-aligned square region in one corner covering about ``frac`` of the grid."""
    m = np.zeros((size, size), dtype=bool)
    side = int(round(size * np.sqrt(frac)))
    if side == 0:
        return m
    if corner == "nw":
        m[:side, :side] = True
    else:
        m[-side:, -side:] = True
    return m


def _truth_series(spec: SceneSpec, rng, n: int, blocked: np.ndarray):
    size = spec.size
    base = _bumps(rng, spec.blob_count, size, spec.blob_radius)
    growth = _bumps(rng, spec.growth_blobs, size, spec.blob_radius)
    height_field = _bumps(rng, spec.blob_count, size, spec.blob_radius)
    base = spec.density_peak * base / max(base.max(), 1e-12)
    growth = growth / max(growth.max(), 1e-12)
    height_field = height_field / max(height_field.max(), 1e-12)
    base[blocked] = 0.0
    growth[blocked] = 0.0
    dens, hgts = [], []
    for q in range(n):
        d = np.clip(base + spec.growth_per_quarter * q * growth, 0.0, 1.0)
        d = np.where(d > DENSITY_FLOOR, d, 0.0)
        h = np.where(d > 0, MIN_HEIGHT_M + (MAX_TRUTH_HEIGHT_M - MIN_HEIGHT_M) * height_field, 0.0)
        dens.append(d.astype(np.float32))
        hgts.append((h / 100.0).astype(np.float32))
    growth_mask = (dens[-1] > 0) & (dens[0] < dens[-1])
    return dens, hgts, growth_mask


def synth_timeseries(spec: SceneSpec, quarters: int = 16, quad_index: int = 0) -> Scene:
    """One synthetic quad with ``quarters`` consecutive quarters of layers."""
    if quarters < 4:
        raise ValueError("need at least 4 quarters")
    rng = np.random.default_rng([spec.seed, quad_index])
    size = spec.size
    quad = QuadId(1000 + quad_index, 1000)
    grid = quad_grid(quad, size)
    udm_grid = quad_grid(quad, size * POOL_FACTOR)

    water = _corner_mask(size, spec.water_fraction, "nw")
    high = _corner_mask(size, spec.high_fraction, "se") & ~water
    gsw = np.zeros((size, size), dtype=np.float32)
    gsw[water] = rng.choice([1, 2, 4, 5, 7, 8], size=int(water.sum()))
    dem = rng.uniform(0, 3000, (size, size)).astype(np.float32)
    dem[high] = rng.uniform(5200, 6000, int(high.sum()))

    dens, hgts, growth_mask = _truth_series(spec, rng, quarters, water | high)
    schedule = {q: (d, c) for q, d, c in spec.noise_schedule}
    tokens = [shift_quarter(spec.first_quarter, i) for i in range(quarters)]
    preds, udms, truth = [], [], []
    for q in range(quarters):
        d = dens[q].astype(np.float64)
        h = hgts[q].astype(np.float64)
        truth.append(QuadRaster(grid, np.stack([dens[q], hgts[q]])))
        built = d > 0
        noise_d = rng.normal(0.0, 1.0, (size, size)) * spec.noise_sigma
        noise_h = rng.normal(0.0, 1.0, (size, size)) * spec.noise_sigma
        fp = ~built & (rng.random((size, size)) < spec.false_positive)
        fp_val = rng.uniform(0.02, 0.3, (size, size))
        pd = np.where(built, np.clip(d + noise_d, 0.0, 1.0), np.where(fp, fp_val, 0.0))
        ph = np.where(built, np.clip(h + noise_h * 0.1, 0.0, 1.0), np.where(fp, 0.05, 0.0))
        drop, cloud = schedule.get(q, (0.0, spec.cloud_fraction))
        dropped = rng.random((size, size)) < drop
        clouds = rng.random((size, size)) < cloud
        zero = dropped | clouds
        pd[zero] = 0.0
        ph[zero] = 0.0
        preds.append(QuadRaster(grid, np.stack([pd, ph]).astype(np.float32)))

        big_cloud = np.kron(clouds, np.ones((POOL_FACTOR, POOL_FACTOR), dtype=bool))
        clazz = np.where(big_cloud, UdmClass.CLOUD, UdmClass.CLEAR).astype(np.float32)
        lo, hi = spec.clear_confidence
        conf = rng.uniform(lo, hi, big_cloud.shape) if hi > lo else np.full(big_cloud.shape, lo)
        conf = np.where(big_cloud, 100.0, conf)
        udms.append(QuadRaster(udm_grid, np.stack([clazz, conf]).astype(np.float32)))

    return Scene(
        quad,
        tokens,
        preds,
        udms,
        QuadRaster(grid, gsw),
        QuadRaster(grid, dem),
        truth,
        growth_mask,
    )


def synth_scenes(spec: SceneSpec, quarters: int = 16) -> list[Scene]:
    return [synth_timeseries(spec, quarters, i) for i in range(spec.quads)]


def write_scene(scene: Scene, root, ext: str = ".tif", with_udm: bool = True) -> Manifest:
    """Write the pipeline's input layout and return a manifest of every quarter
    that has three predecessors."""
    root = Path(root)
    name = format_quad_id(scene.quad) + ext
    for token, pred, udm in zip(scene.quarters, scene.predictions, scene.udm):
        write_raster(pred, root / "pred" / token / name)
        if with_udm:
            write_raster(udm, root / "udm" / token / name)
    write_raster(scene.gsw, root / "gsw" / name)
    write_raster(scene.dem, root / "dem" / name)
    return Manifest([WorkItem(scene.quad, t) for t in scene.quarters[3:]])


def annual_layers(layers: list[QuadRaster], quarters: list[str], band: int = 0) -> list[np.ndarray]:
    """Q4 snapshot of ``band`` for every year in ``quarters`` (chronological)."""
    return [r.data[band] for r, t in zip(layers, quarters) if t.endswith("q4")]


def noisy_spec(seed: int = 0, **overrides) -> SceneSpec:
    """Reference noisy scene: jittered built pixels, sparse false positives, one
    dropout/cloud quarter per year, background cloud at ~0.4% of pixels."""
    params = dict(
        seed=seed,
        noise_sigma=0.05,
        false_positive=0.03,
        cloud_fraction=0.004,
        noise_schedule=[(5, 0.3, 0.05), (10, 0.2, 0.2), (15, 0.3, 0.1)],
    )
    params.update(overrides)
    return SceneSpec(**params)
