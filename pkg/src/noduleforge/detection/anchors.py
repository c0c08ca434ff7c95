"""Anchor tiling over pyramid levels and IoU-based label assignment."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .boxes import Box3, as_box_array, iou_matrix

POSITIVE, NEGATIVE, IGNORED = 1, 0, -1


class AnchorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Anchor:
    box: Box3
    level: int
    cell: Tuple[int, int, int]


@dataclass
class AnchorSet:
    """Anchors as parallel arrays; ``boxes`` rows are ``[z, y, x, d]`` in voxels."""

    boxes: np.ndarray
    levels: np.ndarray
    cells: np.ndarray

    def __len__(self):
        return len(self.boxes)

    def __getitem__(self, i) -> Anchor:
        return Anchor(Box3.from_zyxd(self.boxes[i]), int(self.levels[i]),
                      tuple(int(v) for v in self.cells[i]))


def generate_anchors(grid_shapes: Mapping[int, Sequence[int]],
                     scales: Mapping[int, Sequence[float]]) -> AnchorSet:
    """One anchor per (level, cell, scale).

    ``grid_shapes`` maps a pyramid level to its ``(D, H, W)`` cell grid;
    cells at level ``r`` have stride ``2**r``. Ordering is level-major, then
    cells in array order, then scale.
    """
    boxes, levels, cells = [], [], []
    for level in sorted(scales):
        sc = np.asarray(scales[level], dtype=np.float64)
        if sc.size == 0:
            raise AnchorConfigError(f"level {level} has no anchor scales")
        if level not in grid_shapes:
            raise AnchorConfigError(f"level {level} missing from pyramid")
        stride = 2 ** level
        grid = np.stack(np.meshgrid(*[np.arange(n) for n in grid_shapes[level]],
                                    indexing="ij"), axis=-1).reshape(-1, 3)
        centers = (grid + 0.5) * stride
        b = np.empty((len(grid), len(sc), 4))
        b[..., :3] = centers[:, None, :]
        b[..., 3] = sc[None, :]
        boxes.append(b.reshape(-1, 4))
        levels.append(np.full(len(grid) * len(sc), level, dtype=np.int64))
        cells.append(np.repeat(grid, len(sc), axis=0))
    if not boxes:
        raise AnchorConfigError("no anchor levels configured")
    return AnchorSet(np.concatenate(boxes), np.concatenate(levels), np.concatenate(cells))


@dataclass
class Assignment:
    """Per-anchor labels: 1 positive, 0 negative, -1 ignored."""

    labels: np.ndarray
    matched_gt: np.ndarray
    iou: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return np.nonzero(self.labels == POSITIVE)[0]

    @property
    def negatives(self) -> np.ndarray:
        return np.nonzero(self.labels == NEGATIVE)[0]


def assign(anchors, gt_boxes, pos_iou: float = 0.5, neg_iou: float = 0.2,
           force_match: bool = True) -> Assignment:
    """Label anchors by their best IoU with any ground truth.

    IoU above ``pos_iou`` is positive, below ``neg_iou`` negative, anything
    in between ignored. With ``force_match`` each ground truth also claims
    its single best anchor (first in order on ties) as a positive.
    """
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else as_box_array(anchors)
    gt = as_box_array(gt_boxes)
    n = len(boxes)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    best = np.zeros(n)
    if len(gt) == 0 or n == 0:
        return Assignment(labels, matched, best)
    ious = _sparse_ious(boxes, gt)
    arg = ious.argmax(axis=1)
    best = ious[np.arange(n), arg]
    pos = best > pos_iou
    labels[(best >= neg_iou) & ~pos] = IGNORED
    labels[pos] = POSITIVE
    matched[pos] = arg[pos]
    if force_match:
        for g in range(len(gt)):
            a = int(np.argmax(ious[:, g]))
            if ious[a, g] > 0:
                labels[a] = POSITIVE
                matched[a] = g
                best[a] = ious[a, g]
    return Assignment(labels, matched, best)


def _sparse_ious(boxes: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """IoU matrix computed only for anchors that can overlap some ground truth."""
    out = np.zeros((len(boxes), len(gt)))
    reach = (boxes[:, None, 3] + gt[None, :, 3]) / 2
    near = (np.abs(boxes[:, None, :3] - gt[None, :, :3]) < reach[..., None]).all(-1).any(1)
    idx = np.nonzero(near)[0]
    if len(idx):
        out[idx] = iou_matrix(boxes[idx], gt)
    return out
