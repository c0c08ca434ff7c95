"""Final-stage filtering and mapping from patch voxels to volume millimetres."""
from __future__ import annotations

import csv
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .boxes import Box3, Detection

CSV_FIELDS = ("volume_id", "cx_mm", "cy_mm", "cz_mm", "d_mm", "score", "stage")


def _zyx(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.size == 1:
        arr = np.repeat(arr, 3)
    return arr


def to_world(det: Detection, patch_origin, spacing) -> Detection:
    """Patch voxel frame -> volume mm frame (``origin``/``spacing`` in z, y, x order).

    Centres scale per axis; the cube edge scales by the mean spacing.
    """
    origin, spacing = _zyx(patch_origin), _zyx(spacing)
    if (spacing <= 0).any():
        raise ValueError("spacing must be positive")
    z, y, x, d = det.box.zyxd
    cz, cy, cx = (origin + np.array([z, y, x])) * spacing
    return Detection(Box3(cx=float(cx), cy=float(cy), cz=float(cz), d=float(d * spacing.mean())),
                     det.score, det.stage, det.volume_id)


def boxes_to_world(boxes: np.ndarray, patch_origin, spacing) -> np.ndarray:
    origin, spacing = _zyx(patch_origin), _zyx(spacing)
    out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    out[:, :3] = (origin + out[:, :3]) * spacing
    out[:, 3] = out[:, 3] * spacing.mean()
    return out


def filter_small(dets: Sequence[Detection], min_diameter_mm: float = 3.0,
                 spacing=None) -> List[Detection]:
    """Drop detections whose diameter is under ``min_diameter_mm``.

    ``spacing`` converts a voxel-frame diameter to mm (mean over axes); pass
    ``1.0`` for detections already in mm. Exactly ``min_diameter_mm`` is kept.
    """
    if spacing is None:
        raise ValueError("filter_small needs the voxel spacing (use 1.0 for mm-frame input)")
    scale = float(_zyx(spacing).mean())
    return [d for d in dets if d.box.d * scale >= min_diameter_mm]


def write_detections_csv(path, dets: Iterable[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for d in dets:
            w.writerow([d.volume_id, repr(float(d.box.cx)), repr(float(d.box.cy)), repr(float(d.box.cz)),
                        repr(float(d.box.d)), repr(float(d.score)), int(d.stage)])


def read_detections_csv(path) -> List[Detection]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"{path}: expected header {','.join(CSV_FIELDS)}")
        return [Detection(Box3(float(r["cx_mm"]), float(r["cy_mm"]), float(r["cz_mm"]), float(r["d_mm"])),
                          float(r["score"]), int(r["stage"]), r["volume_id"]) for r in reader]
