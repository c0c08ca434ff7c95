"""Label-consistent augmentation of cubic patches.

Coordinates use the voxel-edge frame: voxel ``i`` spans ``[i, i + 1)``, so
a patch of edge ``P`` spans ``[0, P)`` and its centre is ``P / 2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .patches import Patch


@dataclass
class AugmentRecord:
    edge: int
    scale: float = 1.0
    flips: Tuple[bool, bool, bool] = (False, False, False)
    quarter_turns: int = 0
    angle: float = 0.0

    def _rotate(self, pts: np.ndarray, k: int, angle: float) -> np.ndarray:
        p = float(self.edge)
        out = pts.copy()
        for _ in range(k % 4):
            y, x = out[:, 1].copy(), out[:, 2].copy()
            out[:, 1], out[:, 2] = p - x, y
        if angle:
            c = p / 2
            t = np.deg2rad(angle)
            y, x = out[:, 1] - c, out[:, 2] - c
            out[:, 1] = c + np.cos(t) * y + np.sin(t) * x
            out[:, 2] = c - np.sin(t) * y + np.cos(t) * x
        return out

    def apply(self, boxes: np.ndarray) -> np.ndarray:
        """Map ``[z, y, x, d]`` rows through scale, flips, then rotation."""
        b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
        c = self.edge / 2
        b[:, :3] = c + self.scale * (b[:, :3] - c)
        b[:, 3] *= self.scale
        for ax, f in enumerate(self.flips):
            if f:
                b[:, ax] = self.edge - b[:, ax]
        b[:, :3] = self._rotate(b[:, :3], self.quarter_turns, self.angle)
        return b

    def invert(self, boxes: np.ndarray) -> np.ndarray:
        b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
        if self.angle:
            b[:, :3] = self._rotate(b[:, :3], 0, -self.angle)
        b[:, :3] = self._rotate(b[:, :3], -self.quarter_turns % 4, 0.0)
        for ax, f in enumerate(self.flips):
            if f:
                b[:, ax] = self.edge - b[:, ax]
        c = self.edge / 2
        b[:, :3] = c + (b[:, :3] - c) / self.scale
        b[:, 3] /= self.scale
        return b


def apply_to_voxels(vox: np.ndarray, rec: AugmentRecord) -> np.ndarray:
    p = vox.shape[0]
    out = vox
    if rec.scale != 1.0:
        c = p / 2
        offset = c + (0.5 - c) / rec.scale - 0.5
        out = ndimage.affine_transform(out, np.eye(3) / rec.scale, offset=offset,
                                       order=1, mode="nearest")
    for ax, f in enumerate(rec.flips):
        if f:
            out = np.flip(out, axis=ax)
    if rec.quarter_turns % 4:
        out = np.rot90(out, rec.quarter_turns % 4, axes=(1, 2))
    if rec.angle:
        out = ndimage.rotate(out, -rec.angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
    return np.ascontiguousarray(out)


def augment(patch: Patch, rng: np.random.Generator, scale_range=(0.75, 1.25), flip: bool = True,
            rotate: bool = True, arbitrary_angle: bool = False,
            record: Optional[AugmentRecord] = None) -> Tuple[Patch, AugmentRecord]:
    """Random scale in ``scale_range``, 50% flip per axis, rotation about z.

    Rotation is a uniformly chosen multiple of 90 degrees, or, with
    ``arbitrary_angle``, any angle in [0, 360) with cube diameters unchanged.
    Pass ``record`` to replay a fixed transform.
    """
    p = patch.edge
    if record is None:
        scale = float(rng.uniform(*scale_range)) if scale_range else 1.0
        flips = tuple(bool(rng.random() < 0.5) for _ in range(3)) if flip else (False,) * 3
        turns, angle = 0, 0.0
        if rotate and arbitrary_angle:
            angle = float(rng.uniform(0.0, 360.0))
        elif rotate:
            turns = int(rng.integers(4))
        record = AugmentRecord(p, scale, flips, turns, angle)
    vox = apply_to_voxels(patch.voxels, record)
    return Patch(vox, patch.origin, record.apply(patch.boxes), patch.volume_id), record
