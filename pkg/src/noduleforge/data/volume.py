"""CT volumes stored as a JSON header plus raw little-endian int16 voxels."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..detection.boxes import Box3

HEADER_KEYS = ("volume_id", "dims", "spacing_mm", "rescale_slope", "rescale_intercept", "raw_file")
DEFAULT_WINDOW = (-1000.0, 400.0)


class VolumeFormatError(ValueError):
    pass


@dataclass
class VolumeHeader:
    volume_id: str
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    rescale_slope: float = 1.0
    rescale_intercept: float = -1024.0

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        self.spacing = tuple(float(v) for v in self.spacing)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise VolumeFormatError(f"dims must be three positive extents, got {self.dims}")
        if len(self.spacing) != 3 or not all(s > 0 for s in self.spacing):
            raise VolumeFormatError(f"spacing must be three positive values, got {self.spacing}")


@dataclass
class Volume:
    header: VolumeHeader
    sv: np.ndarray
    _hu: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.sv = np.asarray(self.sv, dtype=np.int16)
        if self.sv.shape != self.header.dims:
            raise VolumeFormatError(f"voxel grid {self.sv.shape} != header dims {self.header.dims}")

    @property
    def volume_id(self) -> str:
        return self.header.volume_id

    @property
    def spacing(self) -> Tuple[float, float, float]:
        return self.header.spacing

    @property
    def hu(self) -> np.ndarray:
        if self._hu is None:
            self._hu = rescale_to_hu(self.sv, self.header.rescale_slope, self.header.rescale_intercept)
        return self._hu


@dataclass(frozen=True)
class Annotation:
    """Ground-truth nodule: centre ``(x, y, z)`` and diameter, all in mm."""

    volume_id: str
    x: float
    y: float
    z: float
    diameter: float

    def __post_init__(self):
        if not self.diameter > 0:
            raise ValueError(f"annotation diameter must be positive, got {self.diameter}")

    @property
    def box(self) -> Box3:
        return Box3(cx=self.x, cy=self.y, cz=self.z, d=self.diameter)

    def voxel_box(self, spacing) -> np.ndarray:
        """``[z, y, x, d]`` in the voxel frame of the parent volume."""
        sp = np.asarray(spacing, dtype=np.float64)
        return np.array([self.z / sp[0], self.y / sp[1], self.x / sp[2], self.diameter / sp.mean()])


def rescale_to_hu(sv, m: float, b: float):
    """Stored value -> Hounsfield units: ``m * SV + b``."""
    if np.isscalar(sv):
        return m * sv + b
    return np.asarray(sv, dtype=np.float64) * m + b


def normalize(hu, window: Sequence[float] = DEFAULT_WINDOW) -> np.ndarray:
    """Clamp to ``window`` and map linearly onto [0, 1]."""
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"window must satisfy lo < hi, got {window}")
    return (np.clip(np.asarray(hu, dtype=np.float64), lo, hi) - lo) / (hi - lo)


def write_volume(vol: Volume, directory) -> Path:
    """Write ``<id>.json`` and ``<id>.raw`` into ``directory``; returns the header path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h = vol.header
    raw_name = f"{h.volume_id}.raw"
    (directory / raw_name).write_bytes(np.ascontiguousarray(vol.sv, dtype="<i2").tobytes())
    header = {"volume_id": h.volume_id, "dims": list(h.dims), "spacing_mm": list(h.spacing),
              "rescale_slope": h.rescale_slope, "rescale_intercept": h.rescale_intercept,
              "raw_file": raw_name}
    path = directory / f"{h.volume_id}.json"
    path.write_text(json.dumps(header, indent=2))
    return path


def read_volume(path) -> Volume:
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: unreadable header ({exc})") from exc
    missing = [k for k in HEADER_KEYS if k not in meta]
    if missing:
        raise VolumeFormatError(f"{path}: header missing fields {missing}")
    header = VolumeHeader(meta["volume_id"], meta["dims"], meta["spacing_mm"],
                          float(meta["rescale_slope"]), float(meta["rescale_intercept"]))
    raw_path = path.parent / meta["raw_file"]
    try:
        payload = raw_path.read_bytes()
    except OSError as exc:
        raise VolumeFormatError(f"{raw_path}: cannot read voxel payload ({exc})") from exc
    expected = 2 * int(np.prod(header.dims))
    if len(payload) != expected:
        raise VolumeFormatError(f"{raw_path}: expected {expected} bytes for dims {header.dims}, "
                                f"found {len(payload)}")
    sv = np.frombuffer(payload, dtype="<i2").reshape(header.dims).astype(np.int16)
    return Volume(header, sv)


ANNOTATION_FIELDS = ("volume_id", "x_mm", "y_mm", "z_mm", "diameter_mm")


def write_annotations(path, annotations: Iterable[Annotation]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ANNOTATION_FIELDS)
        for a in annotations:
            w.writerow((a.volume_id, *(repr(float(v)) for v in (a.x, a.y, a.z, a.diameter))))


def read_annotations(path) -> List[Annotation]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ANNOTATION_FIELDS:
            raise VolumeFormatError(f"{path}: expected header {','.join(ANNOTATION_FIELDS)}")
        return [Annotation(r["volume_id"], float(r["x_mm"]), float(r["y_mm"]), float(r["z_mm"]),
                           float(r["diameter_mm"])) for r in reader]
