"""Axis-aligned cubes: overlap, regression encoding, suppression.

Boxes travel as ``(n, 4)`` float arrays ``[z, y, x, d]`` whose centre
columns follow array-axis order (D, H, W). In the voxel frame voxel ``i``
spans ``[i, i + 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Box3:
    """Cube of edge ``d`` centred at ``(cx, cy, cz)``."""

    cx: float
    cy: float
    cz: float
    d: float

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError(f"box diameter must be positive, got {self.d}")

    @property
    def zyxd(self) -> np.ndarray:
        return np.array([self.cz, self.cy, self.cx, self.d], dtype=np.float64)

    @classmethod
    def from_zyxd(cls, row) -> "Box3":
        z, y, x, d = (float(v) for v in row)
        return cls(cx=x, cy=y, cz=z, d=d)


@dataclass(frozen=True)
class Detection:
    box: Box3
    score: float
    stage: int = 0
    volume_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, Box3):
        return boxes.zyxd[None]
    if len(boxes) and isinstance(boxes[0], Box3):
        return np.stack([b.zyxd for b in boxes])
    arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise cube IoU, shape ``(len(a), len(b))``."""
    a, b = as_box_array(a), as_box_array(b)
    if (a[:, 3] <= 0).any() or (b[:, 3] <= 0).any():
        raise ValueError("box diameters must be positive")
    ha, hb = a[:, None, 3] / 2, b[None, :, 3] / 2
    lo = np.maximum(a[:, None, :3] - ha[..., None], b[None, :, :3] - hb[..., None])
    hi = np.minimum(a[:, None, :3] + ha[..., None], b[None, :, :3] + hb[..., None])
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=-1)
    union = a[:, None, 3] ** 3 + b[None, :, 3] ** 3 - inter
    return inter / union


def iou3d(a: Box3, b: Box3) -> float:
    return float(iou_matrix(a, b)[0, 0])


def encode(gt, anchors) -> np.ndarray:
    """Regression targets ``(tz, ty, tx, td)`` of ``gt`` relative to ``anchors``."""
    gt, anchors = as_box_array(gt), as_box_array(anchors)
    if (gt[:, 3] <= 0).any() or (anchors[:, 3] <= 0).any():
        raise ValueError("encode needs positive diameters")
    t = np.empty(np.broadcast_shapes(gt.shape, anchors.shape))
    t[:, :3] = (gt[:, :3] - anchors[:, :3]) / anchors[:, 3:4]
    t[:, 3] = np.log(gt[:, 3] / anchors[:, 3])
    return t


def decode(deltas, anchors) -> np.ndarray:
    """Inverse of :func:`encode`."""
    deltas, anchors = np.asarray(deltas, dtype=np.float64).reshape(-1, 4), as_box_array(anchors)
    if (anchors[:, 3] <= 0).any():
        raise ValueError("decode needs positive anchor diameters")
    out = np.empty(np.broadcast_shapes(deltas.shape, anchors.shape))
    out[:, :3] = anchors[:, :3] + deltas[:, :3] * anchors[:, 3:4]
    out[:, 3] = anchors[:, 3] * np.exp(deltas[:, 3])
    return out


def nms(boxes, scores, iou_thresh: float, max_keep: Optional[int] = None) -> np.ndarray:
    """Greedy suppression; returns kept indices by descending score.

    Ties in score keep input order. A box is dropped when its IoU with an
    already-kept box exceeds ``iou_thresh``.
    """
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in [0, 1]")
    boxes = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep: List[int] = []
    alive = np.ones(len(order), dtype=bool)
    sorted_boxes = boxes[order]
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        keep.append(int(order[pos]))
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = np.nonzero(alive[pos + 1:])[0] + pos + 1
        if len(rest):
            ious = iou_matrix(sorted_boxes[pos:pos + 1], sorted_boxes[rest])[0]
            alive[rest[ious > iou_thresh]] = False
    return np.asarray(keep, dtype=np.int64)


def nms_detections(dets: Sequence[Detection], iou_thresh: float) -> List[Detection]:
    if not dets:
        return []
    keep = nms([d.box for d in dets], [d.score for d in dets], iou_thresh)
    return [dets[i] for i in keep]
