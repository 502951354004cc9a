"""Static and temporal evaluation metrics for density/height products.

Static metrics compare a prediction grid with a reference grid. Temporal metrics
work on window signals: per-window mean density over consecutive annual layers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .raster import QuadRaster

HEIGHT_BINS_M = ((1e-4, 3.0), (3.0, 10.0), (10.0, 30.0))
WINDOW_SIZES = (3, 7, 10)
REPORT_FIELDS = (
    "precision",
    "recall",
    "f1",
    "accuracy",
    "mae_pos",
    "r2",
    "macro_f1_height",
    "corr_median",
    "mono_auc",
    "diff_std",
)


def _grid(x, nodata: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Band-0 values (float64) and validity mask for a QuadRaster or array."""
    if isinstance(x, QuadRaster):
        v = x.data[0]
        return v.astype(np.float64), v != np.float32(x.nodata)
    v = np.asarray(x, dtype=np.float64)
    if nodata is None:
        return v, np.ones(v.shape, dtype=bool)
    return v, v != nodata


def _pair(pred, ref, nodata):
    p, pv = _grid(pred, nodata)
    r, rv = _grid(ref, nodata)
    if p.shape != r.shape:
        raise ValueError(f"grids not aligned: {p.shape} vs {r.shape}")
    return p, r, pv & rv


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class DetectionReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    tn: int
    empty: bool = False

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "DetectionReport":
        n = tp + fp + fn + tn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        return cls(
            precision,
            recall,
            _f1(precision, recall),
            (tp + tn) / n if n else 0.0,
            tp,
            fp,
            fn,
            tn,
            empty=n == 0,
        )


def confusion_counts(pred_bin: np.ndarray, ref_bin: np.ndarray) -> tuple[int, int, int, int]:
    tp = int(np.count_nonzero(pred_bin & ref_bin))
    fp = int(np.count_nonzero(pred_bin & ~ref_bin))
    fn = int(np.count_nonzero(~pred_bin & ref_bin))
    tn = int(np.count_nonzero(~pred_bin & ~ref_bin))
    return tp, fp, fn, tn


def detection_metrics(
    pred, ref, pred_thr: float = 0.01, ref_thr: float = 0.01, nodata: float | None = None
) -> DetectionReport:
    """Binarize ``pred > pred_thr`` and ``ref > ref_thr`` over cells valid in both."""
    p, r, valid = _pair(pred, ref, nodata)
    return DetectionReport.from_counts(
        *confusion_counts(p[valid] > pred_thr, r[valid] > ref_thr)
    )


@dataclass
class RegressionReport:
    mae_pos: float
    r2: float
    n_pos: int
    n_valid: int
    mae_undefined: bool = False
    r2_degenerate: bool = False


def regression_metrics(pred, ref, nodata: float | None = None) -> RegressionReport:
    """MAE over strictly positive reference cells; R^2 over all valid cells."""
    p, r, valid = _pair(pred, ref, nodata)
    p, r = p[valid], r[valid]
    pos = r > 0
    n_pos = int(pos.sum())
    mae = float(np.mean(np.abs(p[pos] - r[pos]))) if n_pos else math.nan
    if r.size:
        ss_tot = float(np.sum((r - r.mean()) ** 2))
        ss_res = float(np.sum((r - p) ** 2))
    else:
        ss_tot = ss_res = 0.0
    degenerate = ss_tot == 0.0
    r2 = 0.0 if degenerate else 1.0 - ss_res / ss_tot
    return RegressionReport(mae, r2, n_pos, int(r.size), n_pos == 0, degenerate)


@dataclass
class HeightF1Report:
    macro_f1: float
    per_bin: list[float]
    empty_bins: list[bool]


def height_macro_f1(
    pred_m, ref_m, bins: Sequence[tuple[float, float]] = HEIGHT_BINS_M, nodata: float | None = None
) -> HeightF1Report:
    """Unweighted mean F1 over height bins; each bin is the half-open interval (lo, hi]."""
    p, r, valid = _pair(pred_m, ref_m, nodata)
    p, r = p[valid], r[valid]
    scores, empty = [], []
    for lo, hi in bins:
        pb = (p > lo) & (p <= hi)
        rb = (r > lo) & (r <= hi)
        if not pb.any() and not rb.any():
            scores.append(0.0)
            empty.append(True)
            continue
        tp, fp, fn, _ = confusion_counts(pb, rb)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        scores.append(_f1(prec, rec))
        empty.append(False)
    return HeightF1Report(float(np.mean(scores)), scores, empty)


# -- temporal stability -------------------------------------------------------


@dataclass(frozen=True)
class WindowSignal:
    window_id: tuple
    values: tuple[float, ...]


@dataclass(frozen=True)
class StabilityConfig:
    k: int = 3
    tau_max: float = 0.01
    tau_steps: int = 100

    def __post_init__(self):
        if self.tau_steps < 2:
            raise ValueError("tau_steps must be >= 2")
        if not self.tau_max > 0:
            raise ValueError("tau_max must be > 0")


def window_signals(annual: Sequence, k: int, quad: str = "", nodata: float | None = None) -> list[WindowSignal]:
    """Mean valid density of every non-overlapping k x k window, per year.

    Ragged right/bottom edges are dropped. Windows without a valid cell in some
    year, and windows that are zero in every year, are excluded.
    """
    if len(annual) < 2:
        raise ValueError("need at least two annual layers")
    grids = [_grid(a, nodata) for a in annual]
    shape = grids[0][0].shape
    if any(g[0].shape != shape for g in grids):
        raise ValueError("annual layers are not aligned")
    nr, nc = shape[0] // k, shape[1] // k
    if nr == 0 or nc == 0:
        return []
    means = []
    for v, ok in grids:
        v = np.where(ok, v, 0.0)[: nr * k, : nc * k].reshape(nr, k, nc, k)
        ok = ok[: nr * k, : nc * k].reshape(nr, k, nc, k)
        cnt = ok.sum(axis=(1, 3))
        with np.errstate(invalid="ignore", divide="ignore"):
            means.append(np.where(cnt > 0, v.sum(axis=(1, 3)) / cnt, np.nan))
    series = np.stack(means, axis=-1)  # (nr, nc, years)
    keep = ~np.isnan(series).any(axis=-1) & (series != 0).any(axis=-1)
    return [
        WindowSignal((quad, int(i), int(j), k), tuple(float(x) for x in series[i, j]))
        for i, j in zip(*np.nonzero(keep))
    ]


def _matrix(signals) -> np.ndarray:
    if isinstance(signals, np.ndarray):
        return np.asarray(signals, dtype=np.float64)
    rows = [s.values if isinstance(s, WindowSignal) else s for s in signals]
    if not rows:
        return np.empty((0, 0))
    return np.asarray(rows, dtype=np.float64)


def monotone_fraction(diffs: np.ndarray, taus: np.ndarray) -> np.ndarray:
    """Fraction of rows of ``diffs`` that are monotone within each tolerance."""
    lo = diffs.min(axis=1)
    hi = diffs.max(axis=1)
    up = lo[:, None] >= -taus[None, :]
    down = hi[:, None] <= taus[None, :]
    return (up | down).mean(axis=0)


def monotonicity_auc(signals, cfg: StabilityConfig = StabilityConfig()) -> float:
    """Normalized trapezoid area under the monotone-fraction curve over tau in [0, tau_max].

    Returns NaN for an empty signal set.
    """
    m = _matrix(signals)
    if m.shape[0] == 0:
        return math.nan
    if m.shape[1] < 2:
        raise ValueError("signals need at least two values")
    taus = np.linspace(0.0, cfg.tau_max, cfg.tau_steps)
    frac = monotone_fraction(np.diff(m, axis=1), taus)
    return float(np.trapezoid(frac, taus) / cfg.tau_max)


@dataclass
class StabilityReport:
    corr_median: float
    diff_std: float
    pair_corr: list[float] = field(default_factory=list)
    skipped_pairs: list[int] = field(default_factory=list)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a - a.mean()
    db = b - b.mean()
    den = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    return float(np.sum(da * db)) / den if den > 0 else math.nan


def stability_summary(signals) -> StabilityReport:
    """Median adjacent-year Pearson correlation and population STD of pooled differences.

    Each pair correlation drops windows that are zero in both years of the pair.
    Pairs with fewer than two windows or zero variance are skipped and recorded.
    """
    m = _matrix(signals)
    if m.shape[0] == 0:
        return StabilityReport(math.nan, math.nan)
    if m.shape[1] < 2:
        raise ValueError("signals need at least two years")
    corrs, skipped = [], []
    for t in range(m.shape[1] - 1):
        a, b = m[:, t], m[:, t + 1]
        keep = (a != 0) | (b != 0)
        c = _pearson(a[keep], b[keep]) if keep.sum() >= 2 else math.nan
        if math.isnan(c):
            skipped.append(t)
        else:
            corrs.append(c)
    corr_median = float(np.median(corrs)) if corrs else math.nan
    return StabilityReport(corr_median, float(np.std(np.diff(m, axis=1))), corrs, skipped)


# -- reports --------------------------------------------------------------------


def build_report(**values) -> dict:
    """Flat report with every fixed field present (missing ones are None)."""
    unknown = set(values) - set(REPORT_FIELDS)
    if unknown:
        raise KeyError(f"unknown report fields {sorted(unknown)}")
    out = {}
    for k in REPORT_FIELDS:
        v = values.get(k)
        out[k] = None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)
    return out


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=False)


def report_text(report: dict) -> str:
    lines = []
    for k, v in report.items():
        lines.append(f"{k}={'nan' if v is None else repr(v)}")
    return "\n".join(lines) + "\n"


def evaluate_static(pred, ref, kind: str = "density", pred_thr: float = 0.01, ref_thr: float = 0.01) -> dict:
    if kind == "height":
        return build_report(macro_f1_height=height_macro_f1(pred, ref).macro_f1, **_reg(pred, ref))
    det = detection_metrics(pred, ref, pred_thr, ref_thr)
    return build_report(
        precision=det.precision, recall=det.recall, f1=det.f1, accuracy=det.accuracy, **_reg(pred, ref)
    )


def _reg(pred, ref) -> dict:
    reg = regression_metrics(pred, ref)
    return {"mae_pos": reg.mae_pos, "r2": reg.r2}


def evaluate_stability(annual: Sequence, k: int, cfg: StabilityConfig | None = None) -> dict:
    cfg = cfg or StabilityConfig(k=k)
    sig = window_signals(annual, k)
    summ = stability_summary(sig)
    return build_report(
        corr_median=summ.corr_median, mono_auc=monotonicity_auc(sig, cfg), diff_std=summ.diff_std
    )


def signal_values(signals: Iterable[WindowSignal]) -> np.ndarray:
    return _matrix(list(signals))
