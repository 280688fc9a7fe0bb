"""Center anchoring: heatmap targets, focal loss, peak decoding and offsets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import InvalidArgument

HEATMAP_RES = (64, 64)
FOCAL_ALPHA = 2
FOCAL_BETA = 4
MIN_OVERLAP = 0.7
PRED_EPS = 1e-6


@dataclass(frozen=True)
class CenterAnchor:
    """Anchor point ``center`` in cell units of a scene of ``size`` cells."""
    center: tuple[float, float]
    size: tuple[float, float]

    def __post_init__(self):
        if not (self.size[0] > 0 and self.size[1] > 0):
            raise InvalidArgument(f"scene size must be positive, got {self.size}")


def gaussian_radius(box_size: tuple[float, float], min_overlap: float = MIN_OVERLAP) -> float:
    """Largest corner displacement that keeps IoU >= ``min_overlap``.

    Three displacement patterns are considered (shifted box, both corners
    inward, both outward); the tightest one wins.
    """
    h, w = box_size
    o = min_overlap
    # shifted by r along both axes
    b1 = h + w
    c1 = h * w * (1 - o) / (1 + o)
    r1 = (b1 - np.sqrt(b1 ** 2 - 4 * c1)) / 2
    # both corners inward
    a2, b2, c2 = 4, -2 * (h + w), (1 - o) * h * w
    r2 = (-b2 - np.sqrt(b2 ** 2 - 4 * a2 * c2)) / (2 * a2)
    # both corners outward
    a3, b3, c3 = 4 * o, 2 * o * (h + w), (o - 1) * h * w
    r3 = (-b3 + np.sqrt(b3 ** 2 - 4 * a3 * c3)) / (2 * a3)
    return float(min(r1, r2, r3))


def gaussian_sigma(box_size: tuple[float, float]) -> float:
    return max(1.0, gaussian_radius(box_size) / 3.0)


def gaussian_target(center: tuple[int, int], box_size: tuple[float, float],
                    resolution: tuple[int, int] = HEATMAP_RES) -> np.ndarray:
    """Gaussian bump peaking at exactly 1 on the integer ``center`` cell."""
    h, w = resolution
    ci, cj = center
    if not (0 <= ci < h and 0 <= cj < w):
        raise InvalidArgument(f"center {center} outside the {h}x{w} grid")
    if not (box_size[0] > 0 and box_size[1] > 0):
        raise InvalidArgument(f"box size must be positive, got {box_size}")
    sigma = gaussian_sigma(box_size)
    i = np.arange(h)[:, None]
    j = np.arange(w)[None, :]
    return np.exp(-((i - ci) ** 2 + (j - cj) ** 2) / (2 * sigma ** 2))


def focal_loss(pred, target) -> Tensor:
    """Penalty-reduced focal loss averaged over cells (nonnegative).

    ``pred`` may be a Tensor (gradients flow) or an array; leading batch axes
    are averaged together with the cells.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise InvalidArgument(f"heatmap shapes differ: {pred.shape} vs {target.shape}")
    y = ag.clip(pred, PRED_EPS, 1.0 - PRED_EPS)
    pos = (target == 1.0).astype(pred.dtype)
    neg_w = ((1.0 - target) ** FOCAL_BETA * (1.0 - pos)).astype(pred.dtype)
    pos_term = (1.0 - y) ** FOCAL_ALPHA * ag.log(y) * pos
    neg_term = y ** FOCAL_ALPHA * ag.log(1.0 - y) * neg_w
    return -ag.mean(pos_term + neg_term)


def focal_loss_from_logits(logits: Tensor, target) -> Tensor:
    return focal_loss(ag.sigmoid(logits), target)


def extract_peak(heatmap) -> tuple[int, int]:
    """Argmax cell; ties resolve to the first cell in row-major order."""
    hm = np.asarray(heatmap)
    if hm.size == 0:
        raise InvalidArgument("empty heatmap")
    k = int(np.argmax(hm))
    return divmod(k, hm.shape[1])


def peak_anchor(heatmap) -> CenterAnchor:
    """Anchor at the center of the peak cell."""
    hm = np.asarray(heatmap)
    i, j = extract_peak(hm)
    return CenterAnchor((i + 0.5, j + 0.5), hm.shape)


def normalize(points, anchor: CenterAnchor) -> np.ndarray:
    """Map points (cell units) to stored offsets ``((p - c) / size + 1) / 2``."""
    p = np.asarray(points, dtype=np.float64)
    off = (p - np.asarray(anchor.center)) / np.asarray(anchor.size, dtype=np.float64)
    return (off + 1.0) / 2.0


def denormalize(values, anchor: CenterAnchor) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return (2.0 * v - 1.0) * np.asarray(anchor.size, dtype=np.float64) + np.asarray(anchor.center)
