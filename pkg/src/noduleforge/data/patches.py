"""Cube tiling of volumes and random crops for training."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .volume import Annotation, Volume, normalize


@dataclass
class Patch:
    voxels: np.ndarray
    origin: np.ndarray
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    volume_id: str = ""

    @property
    def edge(self) -> int:
        return self.voxels.shape[0]


def tile_origins(dim: int, edge: int, stride: int) -> List[int]:
    """Window starts along one axis; the last window is pulled flush to the end."""
    if edge > dim:
        raise ValueError(f"patch edge {edge} exceeds extent {dim}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride > edge:
        raise ValueError(f"stride {stride} exceeds patch edge {edge}; windows would leave gaps")
    starts = list(range(0, dim - edge + 1, stride))
    if starts[-1] != dim - edge:
        starts.append(dim - edge)
    return starts


def volume_boxes(vol: Volume, annotations: Sequence[Annotation]) -> np.ndarray:
    """Voxel-frame ``[z, y, x, d]`` rows for the annotations of ``vol``."""
    rows = [a.voxel_box(vol.spacing) for a in annotations if a.volume_id == vol.volume_id]
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def boxes_in_patch(boxes: np.ndarray, origin, edge: int) -> np.ndarray:
    """Boxes whose centre falls inside the window, shifted into patch coordinates."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    origin = np.asarray(origin, dtype=np.float64)
    local = boxes.copy()
    local[:, :3] -= origin
    inside = ((local[:, :3] >= 0) & (local[:, :3] < edge)).all(axis=1)
    return local[inside]


def extract_patches(volume: Union[Volume, np.ndarray], edge: int, stride: int,
                    annotations: Sequence = (), volume_id: str = "") -> List[Patch]:
    """Sliding-window tiling with total coverage.

    ``volume`` is a :class:`Volume` (voxels are the normalised HU grid and
    ``annotations`` are :class:`Annotation`) or a bare array (``annotations``
    are voxel-frame boxes).
    """
    if isinstance(volume, Volume):
        grid = normalize(volume.hu)
        boxes = volume_boxes(volume, annotations)
        volume_id = volume.volume_id
    else:
        grid = np.asarray(volume)
        boxes = np.asarray(annotations, dtype=np.float64).reshape(-1, 4)
    if any(edge > n for n in grid.shape):
        raise ValueError(f"patch edge {edge} exceeds volume dims {grid.shape}")
    axes = [tile_origins(n, edge, stride) for n in grid.shape]
    patches = []
    for z in axes[0]:
        for y in axes[1]:
            for x in axes[2]:
                o = np.array([z, y, x])
                vox = grid[z:z + edge, y:y + edge, x:x + edge]
                patches.append(Patch(vox, o, boxes_in_patch(boxes, o, edge), volume_id))
    return patches


def crop(grid: np.ndarray, origin, edge: int, boxes=(), volume_id: str = "") -> Patch:
    origin = np.clip(np.asarray(origin, dtype=np.int64), 0, np.array(grid.shape) - edge)
    z, y, x = origin
    vox = grid[z:z + edge, y:y + edge, x:x + edge]
    return Patch(vox.copy(), origin, boxes_in_patch(boxes, origin, edge), volume_id)


def random_crop(grid: np.ndarray, boxes: np.ndarray, edge: int, rng: np.random.Generator,
                positive: bool, jitter: Optional[float] = None, volume_id: str = "") -> Patch:
    """A crop centred near a random nodule (``positive``) or anywhere in the volume."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    hi = np.array(grid.shape) - edge
    if positive and len(boxes):
        b = boxes[rng.integers(len(boxes))]
        j = edge / 4 if jitter is None else jitter
        center = b[:3] + rng.uniform(-j, j, size=3)
        origin = np.round(center - edge / 2).astype(np.int64)
    else:
        origin = np.array([rng.integers(0, h + 1) for h in hi])
    return crop(grid, origin, edge, boxes, volume_id)
