"""Training-side numerics: bounded Huber regression, quad sampling, patches, augmentation.

Random draws go through ``rng.random()`` only, in a fixed order, so any source of
uniform [0, 1) floats (``numpy.random.Generator``, ``random.Random`` or a scripted
stub) reproduces the same augmentation:

``augment_sample`` draws, in order: horizontal-flip u, vertical-flip u, erase u,
then only when erasing: area fraction u, aspect u, row u, col u (and another
row/col pair for each placement retry).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .grid import POOL_FACTOR, QUAD_PIXELS

LABEL_NODATA = -1.0
IMAGE_PATCH = 512
LABEL_PATCH = IMAGE_PATCH // POOL_FACTOR

ERASE_AREA = (0.2, 1.0)
ERASE_ASPECT = (0.3, 3.3)
MAX_PLACEMENT_TRIES = 10


@dataclass(frozen=True)
class LossParams:
    delta: float = 0.7

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")


def hard_sigmoid(x):
    """Piecewise-linear sigmoid: 0 below -3, 1 above 3, (x + 3) / 6 between."""
    if np.ndim(x) == 0:
        x = float(x)
        if x < -3.0:
            return 0.0
        if x > 3.0:
            return 1.0
        return (x + 3.0) / 6.0
    return np.clip((np.asarray(x, dtype=np.float64) + 3.0) / 6.0, 0.0, 1.0)


def hard_sigmoid_grad(x):
    x = np.asarray(x, dtype=np.float64)
    g = np.where((x >= -3.0) & (x <= 3.0), 1.0 / 6.0, 0.0)
    return float(g) if g.ndim == 0 else g


def huber(y, yhat, p: LossParams = LossParams()):
    r = np.abs(np.asarray(y, dtype=np.float64) - np.asarray(yhat, dtype=np.float64))
    d = p.delta
    out = np.where(r <= d, 0.5 * r * r, d * (r - 0.5 * d))
    return float(out) if out.ndim == 0 else out


def huber_grad(y, yhat, p: LossParams = LossParams()):
    """Derivative of ``huber`` with respect to the prediction ``yhat``."""
    diff = np.asarray(yhat, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    out = np.where(np.abs(diff) <= p.delta, diff, p.delta * np.sign(diff))
    return float(out) if out.ndim == 0 else out


def bounded_loss(y, logit, p: LossParams = LossParams()):
    return huber(y, hard_sigmoid(logit), p)


def bounded_loss_grad(y, logit, p: LossParams = LossParams()):
    """d/dlogit of huber(y, hard_sigmoid(logit)); undefined exactly at the kinks."""
    return huber_grad(y, hard_sigmoid(logit), p) * hard_sigmoid_grad(logit)


class PatchLoss(NamedTuple):
    value: float
    n_valid: int

    @property
    def empty(self) -> bool:
        return self.n_valid == 0


def masked_patch_loss(logits, labels, p: LossParams = LossParams()) -> PatchLoss:
    """Mean bounded Huber loss over cells whose label is not -1."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape} vs labels {labels.shape}")
    valid = labels != LABEL_NODATA
    n = int(valid.sum())
    if n == 0:
        return PatchLoss(0.0, 0)
    loss = huber(labels[valid], hard_sigmoid(logits[valid]), p)
    return PatchLoss(float(np.mean(loss)), n)


def density_sums(labels) -> np.ndarray:
    """Sum of valid density per label quad (accepts LabelQuad objects or arrays)."""
    out = []
    for lab in labels:
        d = np.asarray(getattr(lab, "density", lab), dtype=np.float64)
        out.append(d[d != LABEL_NODATA].sum())
    return np.asarray(out)


def default_epsilon(sums: np.ndarray) -> float:
    """0.01 x the mean of the positive quad sums (1.0 when every quad is empty)."""
    pos = sums[sums > 0]
    return 0.01 * float(pos.mean()) if pos.size else 1.0


def quad_sampling_weights(labels, epsilon: float | None = None) -> np.ndarray:
    """Quad selection probabilities proportional to summed density plus ``epsilon``."""
    if len(labels) == 0:
        raise ValueError("need at least one label quad")
    sums = density_sums(labels)
    eps = default_epsilon(sums) if epsilon is None else float(epsilon)
    if eps < 0:
        raise ValueError(f"epsilon must be >= 0, got {eps}")
    w = sums + eps
    total = w.sum()
    if total <= 0:
        raise ValueError("all quads are empty and epsilon is 0; weights undefined")
    return w / total


@dataclass(frozen=True)
class PatchPair:
    image_origin: tuple[int, int]
    label_origin: tuple[int, int]
    image_size: int = IMAGE_PATCH
    label_size: int = LABEL_PATCH


def sample_patch_pair(rng, quad_pixels: int = QUAD_PIXELS) -> PatchPair:
    """Uniform image-patch origin on the 8-pixel lattice, with the matching label origin."""
    slots = (quad_pixels - IMAGE_PATCH) // POOL_FACTOR + 1
    row = min(int(rng.random() * slots), slots - 1) * POOL_FACTOR
    col = min(int(rng.random() * slots), slots - 1) * POOL_FACTOR
    return PatchPair((row, col), (row // POOL_FACTOR, col // POOL_FACTOR))


def _erase_size(s: float, r: float, h: int, w: int) -> tuple[int, int]:
    area = s * h * w
    eh = min(h, max(1, round(math.sqrt(area * r))))
    ew = min(w, max(1, round(math.sqrt(area / r))))
    return eh, ew


def augment_sample(image: np.ndarray, rng, prior_band: int = 3) -> np.ndarray:
    """Random flips of all bands plus, with p=0.5, a zeroed window in the prior band.

    ``image`` is ``(bands, H, W)``. The window has area fraction s ~ U[0.2, 1] and
    aspect r ~ U[0.3, 3.3]; its side lengths are rounded and clipped to the patch.
    The window is centred at a random pixel and clipped to the patch; if the
    visible part falls more than 20% short of the intended area the centre is
    redrawn, and after ten tries the window is placed fully inside.
    """
    out = np.array(image, copy=True)
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    if rng.random() < 0.5:
        out = out[:, ::-1, :]
    out = np.ascontiguousarray(out)
    if rng.random() < 0.5:
        _, h, w = out.shape
        s = ERASE_AREA[0] + (ERASE_AREA[1] - ERASE_AREA[0]) * rng.random()
        r = ERASE_ASPECT[0] + (ERASE_ASPECT[1] - ERASE_ASPECT[0]) * rng.random()
        eh, ew = _erase_size(s, r, h, w)
        for _ in range(MAX_PLACEMENT_TRIES):
            cy = min(int(rng.random() * h), h - 1)
            cx = min(int(rng.random() * w), w - 1)
            top, left = cy - eh // 2, cx - ew // 2
            r0, r1 = max(top, 0), min(top + eh, h)
            c0, c1 = max(left, 0), min(left + ew, w)
            if (r1 - r0) * (c1 - c0) >= 0.8 * eh * ew:
                break
        else:
            r0 = min(max(top, 0), h - eh)
            c0 = min(max(left, 0), w - ew)
            r1, c1 = r0 + eh, c0 + ew
        out[prior_band, r0:r1, c0:c1] = 0
    return out


def label_patch(labels: np.ndarray, pair: PatchPair) -> np.ndarray:
    r, c = pair.label_origin
    return labels[..., r : r + pair.label_size, c : c + pair.label_size]


def image_patch(image: np.ndarray, pair: PatchPair) -> np.ndarray:
    r, c = pair.image_origin
    return image[..., r : r + pair.image_size, c : c + pair.image_size]

