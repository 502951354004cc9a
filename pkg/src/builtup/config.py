"""Pipeline configuration. JSON files mirror the dataclass fields one-to-one."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import postproc


@dataclass
class PipelineConfig:
    conf_threshold: float = postproc.CONF_THRESHOLD
    clarity_split: float = postproc.CLARITY_SPLIT
    density_floor: float = postproc.DENSITY_FLOOR
    min_height_m: float = postproc.MIN_HEIGHT_M
    elevation_cap_m: float = postproc.ELEVATION_CAP_M
    tau_max: float = 0.01
    tau_steps: int = 100
    k: list[int] = field(default_factory=lambda: [3, 7, 10])
    pred_thr: float = 0.01
    ref_thr: float = 0.01
    change_percentile: float = 95.0
    input_root: str = "."
    output_root: str = "out"
    output_product: str = "pp"
    raster_ext: str = ".tif"

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if isinstance(cfg.density_floor, str):
            num, _, den = cfg.density_floor.partition("/")
            cfg.density_floor = float(num) / float(den or 1)
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path, encoding="utf-8") as fh:
        return PipelineConfig.from_dict(json.load(fh))
