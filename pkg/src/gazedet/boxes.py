"""Normalised boxes, overlap measures and gaze-driven box resizing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, ContractError
from .gaze_pipeline import GazeRecord

PUPIL_DEPTH_FLOOR = 0.05
SCALE_LIMITS = (0.5, 2.0)


@dataclass(frozen=True)
class Box:
    """Centre/size box in normalised image coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ContractError(f"box centre outside the unit square: {self}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ContractError(f"box size must lie in (0, 1]: {self}")

    @classmethod
    def from_xyxy(cls, x0: float, y0: float, x1: float, y1: float) -> Box:
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]

    def area(self) -> float:
        return self.w * self.h

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.xyxy()
        return x0 <= x <= x1 and y0 <= y <= y1

    def clipped(self) -> Box:
        x0, y0, x1, y1 = self.xyxy()
        return Box.from_xyxy(max(x0, 0.0), max(y0, 0.0), min(x1, 1.0), min(y1, 1.0))


def _as_xyxy(b) -> tuple[float, float, float, float]:
    if isinstance(b, Box):
        return b.xyxy()
    cx, cy, w, h = b
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou(a, b) -> float:
    """Intersection over union of two boxes (``Box`` or ``[cx, cy, w, h]``)."""
    ax0, ay0, ax1, ay1 = _as_xyxy(a)
    bx0, by0, bx1, by1 = _as_xyxy(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def giou(a, b) -> float:
    """Generalised IoU in ``[-1, 1]``."""
    ax0, ay0, ax1, ay1 = _as_xyxy(a)
    bx0, by0, bx1, by1 = _as_xyxy(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (hull - union) / hull


def pairwise_giou(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """GIoU matrix between ``(n, 4)`` and ``(m, 4)`` centre-format box arrays."""
    p = np.asarray(pred, dtype=np.float64)[:, None, :]
    g = np.asarray(gt, dtype=np.float64)[None, :, :]
    px0, py0, px1, py1 = p[..., 0] - p[..., 2] / 2, p[..., 1] - p[..., 3] / 2, p[..., 0] + p[..., 2] / 2, p[..., 1] + p[..., 3] / 2
    gx0, gy0, gx1, gy1 = g[..., 0] - g[..., 2] / 2, g[..., 1] - g[..., 3] / 2, g[..., 0] + g[..., 2] / 2, g[..., 1] + g[..., 3] / 2
    inter = np.clip(np.minimum(px1, gx1) - np.maximum(px0, gx0), 0, None) * \
        np.clip(np.minimum(py1, gy1) - np.maximum(py0, gy0), 0, None)
    union = (px1 - px0) * (py1 - py0) + (gx1 - gx0) * (gy1 - gy0) - inter
    hull = (np.maximum(px1, gx1) - np.minimum(px0, gx0)) * (np.maximum(py1, gy1) - np.minimum(py0, gy0))
    return inter / union - (hull - union) / hull


def giou_tensor(pred: nx.Tensor, target: np.ndarray) -> nx.Tensor:
    """Differentiable GIoU between matched rows of ``pred`` (n, 4) and constant ``target`` (n, 4)."""
    t = np.asarray(target, dtype=np.float64)
    pcx, pcy, pw, ph = (pred[:, i] for i in range(4))
    px0, px1 = pcx - pw * 0.5, pcx + pw * 0.5
    py0, py1 = pcy - ph * 0.5, pcy + ph * 0.5
    tx0, tx1 = t[:, 0] - t[:, 2] / 2, t[:, 0] + t[:, 2] / 2
    ty0, ty1 = t[:, 1] - t[:, 3] / 2, t[:, 1] + t[:, 3] / 2
    iw = nx.clamp_min(nx.minimum(px1, tx1) - nx.maximum(px0, tx0), 0.0)
    ih = nx.clamp_min(nx.minimum(py1, ty1) - nx.maximum(py0, ty0), 0.0)
    inter = iw * ih
    union = pw * ph + t[:, 2] * t[:, 3] - inter
    hull = (nx.maximum(px1, tx1) - nx.minimum(px0, tx0)) * (nx.maximum(py1, ty1) - nx.minimum(py0, ty0))
    return inter / union - (hull - union) / hull


def pseudo_box(rec: GazeRecord, size: float = 0.25) -> Box:
    """Square of side ``size`` centred on the gaze point, clipped to the frame."""
    if not rec.valid:
        raise ContractError("pseudo box needs a valid gaze record")
    if not 0.0 < size <= 1.0:
        raise ContractError("size must lie in (0, 1]")
    gx, gy = rec.g_xy
    half = size / 2
    return Box.from_xyxy(max(gx - half, 0.0), max(gy - half, 0.0), min(gx + half, 1.0), min(gy + half, 1.0))


def roi_scale_factor(attn_score: float, p: float, d: float, lambdas: tuple[float, float, float],
                     pupil_direct: bool = False) -> float:
    """The combined attention / pupil / depth scale ``S``."""
    l1, l2, l3 = lambdas
    p = max(p, PUPIL_DEPTH_FLOOR)
    d = max(d, PUPIL_DEPTH_FLOOR)
    pupil_term = l2 * p if pupil_direct else l2 / p
    return l1 * attn_score + pupil_term + l3 / d


def roi_scale(box: Box, attn_score: float, p: float | None, d: float | None,
              lambdas: tuple[float, float, float] = (0.5, 0.3, 0.5), pupil_direct: bool = False) -> Box:
    """Resize ``box`` about its centre by ``S / S_ref`` clamped to ``[0.5, 2]``.

    ``S_ref`` is ``S`` evaluated at ``p = d = 1`` so nominal gaze leaves the
    box untouched. Missing ``p`` or ``d`` count as 1.
    """
    if sum(lambdas) <= 0:
        raise ConfigurationError("RoI scaling weights must have a positive sum")
    p = 1.0 if p is None else min(max(p, PUPIL_DEPTH_FLOOR), 1.0)
    d = 1.0 if d is None else min(max(d, PUPIL_DEPTH_FLOOR), 1.0)
    s = roi_scale_factor(attn_score, p, d, lambdas, pupil_direct)
    s_ref = roi_scale_factor(attn_score, 1.0, 1.0, lambdas, pupil_direct)
    if s_ref <= 0:
        raise ConfigurationError("reference scale is not positive")
    ratio = min(max(s / s_ref, SCALE_LIMITS[0]), SCALE_LIMITS[1])
    w, h = box.w * ratio, box.h * ratio
    x0, x1 = box.cx - w / 2, box.cx + w / 2
    y0, y1 = box.cy - h / 2, box.cy + h / 2
    if x0 >= 0.0 and y0 >= 0.0 and x1 <= 1.0 and y1 <= 1.0:
        return Box(box.cx, box.cy, w, h)
    return Box.from_xyxy(max(x0, 0.0), max(y0, 0.0), min(x1, 1.0), min(y1, 1.0))
