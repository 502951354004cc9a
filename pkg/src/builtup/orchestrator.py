"""Sharded, resumable batch execution of the per-quad post-processing pipeline.

Storage layout under ``input_root`` (``ext`` is ``.tif`` or ``.tgrd``)::

    pred/{quarter}/{quad}{ext}   2 bands: density, normalized height
    udm/{quarter}/{quad}{ext}    2 bands: class code, confidence %, 8x finer grid
    gsw/{quad}{ext}              GSW transition codes
    dem/{quad}{ext}              elevation in meters

Outputs go to ``{output_root}/{output_product}/{quarter}/{quad}{ext}``.

Worker logs are newline-delimited JSON, one record per line::

    {"item": "L15-0001E-0002N/2023q4", "status": "allocated|success|failure",
     "timestamp": "...", "rank": 0, "error": "..."}
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import postproc
from .config import PipelineConfig
from .grid import QuadId, format_quad_id, parse_quad_id
from .raster import QuadRaster, read_raster, write_raster

log = logging.getLogger(__name__)

_QUARTER_RE = re.compile(r"^(\d{4})q([1-4])$")
MANIFEST_VERSION = "1"


def parse_quarter(token: str) -> tuple[int, int]:
    m = _QUARTER_RE.match(token)
    if m is None:
        raise ValueError(f"bad quarter token {token!r}, expected e.g. '2023q4'")
    return int(m.group(1)), int(m.group(2))


def shift_quarter(token: str, n: int) -> str:
    year, q = parse_quarter(token)
    idx = year * 4 + (q - 1) + n
    return f"{idx // 4}q{idx % 4 + 1}"


def window_quarters(token: str) -> list[str]:
    """Quarters t-3 .. t in chronological order."""
    return [shift_quarter(token, -i) for i in (3, 2, 1, 0)]


@dataclass(frozen=True, order=True)
class WorkItem:
    quad: QuadId
    quarter: str

    @property
    def key(self) -> str:
        return f"{format_quad_id(self.quad)}/{self.quarter}"

    @classmethod
    def from_key(cls, key: str) -> "WorkItem":
        quad, _, quarter = key.partition("/")
        parse_quarter(quarter)
        return cls(parse_quad_id(quad), quarter)


@dataclass
class Manifest:
    items: list[WorkItem]
    version: str = MANIFEST_VERSION

    def __post_init__(self):
        seen = set()
        for it in self.items:
            if it in seen:
                raise ValueError(f"duplicate manifest item {it.key}")
            seen.add(it)

    def __len__(self) -> int:
        return len(self.items)

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "items": [{"quad": format_quad_id(i.quad), "quarter": i.quarter} for i in self.items],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        d = json.loads(text)
        items = [WorkItem(parse_quad_id(i["quad"]), i["quarter"]) for i in d["items"]]
        for i in items:
            parse_quarter(i.quarter)
        return cls(items, str(d.get("version", MANIFEST_VERSION)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass
class ShardAssignment:
    rank: int
    world_size: int
    items: list[WorkItem]

    def manifest(self, version: str = MANIFEST_VERSION) -> Manifest:
        return Manifest(list(self.items), version)


def shard_manifest(m: Manifest, world_size: int, rank: int) -> ShardAssignment:
    """Round-robin: item i goes to rank ``i % world_size``."""
    if world_size < 1:
        raise ValueError(f"world_size must be >= 1, got {world_size}")
    if not 0 <= rank < world_size:
        raise ValueError(f"rank {rank} outside [0, {world_size})")
    return ShardAssignment(rank, world_size, m.items[rank::world_size])


def flat_rank(node: int, gpus_per_node: int, gpu: int) -> int:
    """Node/GPU pair to a single rank space: ``node * gpus_per_node + gpu``."""
    if not 0 <= gpu < gpus_per_node:
        raise ValueError(f"gpu {gpu} outside [0, {gpus_per_node})")
    return node * gpus_per_node + gpu


class WorkerLog:
    """Append-only NDJSON progress log; appends are serialized per instance."""

    def __init__(self, path, rank: int = 0):
        self.path = Path(path)
        self.rank = rank
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._seal_partial_line()

    def _seal_partial_line(self) -> None:
        # A crash can leave half a record; start fresh appends on their own line.
        if not self.path.exists() or self.path.stat().st_size == 0:
            return
        with open(self.path, "rb+") as fh:
            fh.seek(-1, os.SEEK_END)
            if fh.read(1) != b"\n":
                fh.write(b"\n")

    def append(self, item: WorkItem, status: str, error: str | None = None) -> None:
        if status not in ("allocated", "success", "failure"):
            raise ValueError(f"bad status {status!r}")
        rec = {
            "item": item.key,
            "status": status,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
            "rank": self.rank,
        }
        if error is not None:
            rec["error"] = error
        line = json.dumps(rec) + "\n"
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()


def read_log_records(source) -> list[dict]:
    """Parse log records, skipping (with a warning) lines that are not valid records."""
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        if not path.exists():
            return []
        lines = path.read_text(encoding="utf-8", errors="replace").splitlines()
    else:
        lines = list(source)
    out = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict) or "item" not in rec or "status" not in rec:
                raise ValueError("missing fields")
        except ValueError as exc:
            log.warning("skipping corrupt log record at line %d: %s", n, exc)
            continue
        out.append(rec)
    return out


def resume_pending(m: Manifest, logs: Iterable) -> Manifest:
    """Items of ``m`` without a ``success`` record in any of ``logs``."""
    done = set()
    for src in logs:
        for rec in read_log_records(src):
            if rec["status"] == "success":
                done.add(rec["item"])
    return Manifest([i for i in m.items if i.key not in done], m.version)


@dataclass
class RunSummary:
    n_items: int = 0
    successes: int = 0
    failures: int = 0
    failed: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_items": self.n_items,
            "successes": self.successes,
            "failures": self.failures,
            "failed": self.failed,
        }


class InputStore:
    """Resolves and loads pipeline inputs. Static layers (GSW, DEM) are cached read-only."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.input_root)
        self._static = lru_cache(maxsize=64)(self._read_static)

    def path(self, product: str, quad: QuadId, quarter: str | None = None) -> Path:
        name = format_quad_id(quad) + self.cfg.raster_ext
        if quarter is None:
            return self.root / product / name
        return self.root / product / quarter / name

    def prediction(self, quad: QuadId, quarter: str) -> QuadRaster:
        return read_raster(self.path("pred", quad, quarter))

    def udm(self, quad: QuadId, quarter: str) -> postproc.UdmQuad | None:
        p = self.path("udm", quad, quarter)
        if not p.exists():
            return None
        return postproc.UdmQuad.from_raster(read_raster(p))

    def _read_static(self, product: str, quad: QuadId) -> np.ndarray:
        r = read_raster(self.path(product, quad))
        arr = r.data[0]
        arr.flags.writeable = False
        return arr

    def masks(self, quad: QuadId) -> postproc.MaskLayers:
        return postproc.MaskLayers(self._static("gsw", quad), self._static("dem", quad))


def output_path(cfg: PipelineConfig, item: WorkItem) -> Path:
    return (
        Path(cfg.output_root)
        / cfg.output_product
        / item.quarter
        / (format_quad_id(item.quad) + cfg.raster_ext)
    )


def postprocess_stack(
    preds: Sequence[QuadRaster],
    udm: postproc.UdmQuad | None,
    masks: postproc.MaskLayers,
    cfg: PipelineConfig,
) -> QuadRaster:
    """Smooth, mask and reconcile four 2-band quarters into the quarter-t product."""
    clarity = None
    if udm is not None:
        factor = udm.clazz.shape[0] // preds[-1].height
        clarity = postproc.clarity_score_quad(udm, cfg.conf_threshold, factor)
    stack = postproc.TimeSeriesStack(list(preds), clarity)
    dens = postproc.rolling_aggregate(stack, "density", 0, cfg.density_floor, cfg.clarity_split)
    hgt = postproc.rolling_aggregate(stack, "height", 1, cfg.density_floor, cfg.clarity_split)
    both = dens.with_data(np.concatenate([dens.data, hgt.data]))
    both = postproc.mask_uninhabitable(both, masks, cfg.elevation_cap_m)
    nd = np.float32(both.nodata)
    d_r = both.with_data(both.data[0:1])
    h = both.data[1]
    h_m = np.where(h != nd, h.astype(np.float64) * 100.0, both.nodata).astype(np.float32)
    d_out, h_out = postproc.enforce_agreement(
        d_r, both.with_data(h_m[np.newaxis]), cfg.density_floor, cfg.min_height_m
    )
    hm = h_out.data[0]
    h_norm = np.where(hm != nd, hm.astype(np.float64) / 100.0, both.nodata).astype(np.float32)
    return both.with_data(np.stack([d_out.data[0], h_norm]))


def process_item(item: WorkItem, cfg: PipelineConfig, store: InputStore) -> Path:
    preds = [store.prediction(item.quad, q) for q in window_quarters(item.quarter)]
    udm = store.udm(item.quad, item.quarter)
    if udm is None:
        log.info("%s: no UDM, using the all-quarter median for split votes", item.key)
    result = postprocess_stack(preds, udm, store.masks(item.quad), cfg)
    return write_raster(result, output_path(cfg, item))


def run_pipeline(
    items: Sequence[WorkItem] | ShardAssignment | Manifest,
    cfg: PipelineConfig,
    workers: int = 1,
    log_path=None,
    rank: int = 0,
) -> RunSummary:
    """Process every item; failures are logged and counted, never raised.

    Outputs are written atomically, so they depend only on the inputs and not
    on worker count or scheduling order.
    """
    if isinstance(items, (ShardAssignment, Manifest)):
        rank = getattr(items, "rank", rank)
        items = items.items
    items = list(items)
    wlog = WorkerLog(log_path, rank) if log_path is not None else None
    store = InputStore(cfg)
    summary = RunSummary(n_items=len(items))
    lock = threading.Lock()

    def one(item: WorkItem) -> None:
        if wlog:
            wlog.append(item, "allocated")
        try:
            process_item(item, cfg, store)
        except Exception as exc:  # noqa: BLE001 - any per-item fault is recorded, run continues
            log.error("%s failed: %s", item.key, exc)
            if wlog:
                wlog.append(item, "failure", f"{type(exc).__name__}: {exc}")
            with lock:
                summary.failures += 1
                summary.failed.append(item.key)
            return
        if wlog:
            wlog.append(item, "success")
        with lock:
            summary.successes += 1

    if workers <= 1:
        for it in items:
            one(it)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, items))
    summary.failed.sort()
    return summary
