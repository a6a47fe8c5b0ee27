"""Axis-aligned box arithmetic in pixel coordinates.

Boxes are continuous half-open regions: area is ``width * height`` with no
+1 pixel convention, which keeps IoU exactly invariant under scaling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ContractError


@dataclass(frozen=True)
class BoxPx:
    x_min: float
    y_min: float
    width: float
    height: float

    def __post_init__(self):
        if self.width < 0 or self.height < 0:
            raise ContractError(f"box has negative extent: {self}")

    @property
    def x_max(self) -> float:
        return self.x_min + self.width

    @property
    def y_max(self) -> float:
        return self.y_min + self.height

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple:
        return self.x_min + self.width / 2, self.y_min + self.height / 2

    def as_tuple(self) -> tuple:
        return (self.x_min, self.y_min, self.width, self.height)


@dataclass(frozen=True)
class Detection:
    box: BoxPx
    score: float
    class_id: int = 0


def iou(a: BoxPx, b: BoxPx) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    # rounding in x_max - x_min can push the overlap past the smaller area
    inter = min(max(iw, 0.0) * max(ih, 0.0), a.area, b.area)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def scale_box(b: BoxPx, factor: float) -> BoxPx:
    """Scale a box about the image origin (all four coordinates multiplied)."""
    if factor <= 0:
        raise ContractError(f"scale factor must be positive, got {factor}")
    return BoxPx(b.x_min * factor, b.y_min * factor, b.width * factor, b.height * factor)


def clip_box(b: BoxPx, width: float, height: float) -> BoxPx:
    x0 = min(max(b.x_min, 0.0), width)
    y0 = min(max(b.y_min, 0.0), height)
    x1 = min(max(b.x_max, 0.0), width)
    y1 = min(max(b.y_max, 0.0), height)
    return BoxPx(x0, y0, x1 - x0, y1 - y0)


def to_array(boxes: Sequence[BoxPx]) -> np.ndarray:
    """(N, 4) float64 array of x_min, y_min, width, height."""
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) xywh arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = bx1 + b[:, 2], by1 + b[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    inter = np.minimum(iw * ih, np.minimum(area_a, area_b))
    union = area_a + area_b - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def nms(dets: Sequence[Detection], iou_threshold: float) -> list:
    """Greedy suppression by descending score; equal scores keep input order."""
    if not dets:
        return []
    scores = np.array([d.score for d in dets], dtype=np.float64)
    # stable sort on -score keeps earlier input first among ties
    order = np.argsort(-scores, kind="stable")
    boxes = to_array([d.box for d in dets])
    suppressed = np.zeros(len(dets), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(dets[i])
        suppressed |= iou_matrix(boxes[i], boxes)[0] > iou_threshold
    return keep
