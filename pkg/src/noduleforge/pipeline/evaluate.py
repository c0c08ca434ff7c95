"""Whole-volume detection by overlapping tiles, and AP evaluation."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..data.patches import extract_patches
from ..data.volume import Annotation, Volume, VolumeFormatError, normalize, read_volume
from ..detection.boxes import Box3, Detection, nms_detections
from ..detection.cascade import Detector, cascade_detect
from ..detection.postprocess import boxes_to_world, filter_small, write_detections_csv
from ..metrics import APReport, ap_report
from ..tensor import Tensor, precision
from .config import DataConfig

SMALL_NODULE_MM = (0.0, 8.0)


def detect_volume(model: Detector, volume: Volume, data: DataConfig = None, batch: int = 4,
                  score_thresh: Optional[float] = None) -> List[Detection]:
    """Tile at stride ``patch // 2``, detect per tile, map to mm, merge.

    Merged detections below the diameter floor are dropped before a final
    NMS pass collapses duplicates from overlapping tiles.
    """
    data = data or DataConfig()
    if volume.spacing is None:
        raise ValueError("volume spacing is required to map detections to mm")
    cfg = model.cfg
    thresh = cfg.score_thresh if score_thresh is None else score_thresh
    edge = min(data.patch, *volume.header.dims)
    grid = normalize(volume.hu, data.window)
    dtype = model.parameters()[0].dtype
    tiles = extract_patches(grid, edge, max(edge // 2, 1))
    was_training = model.training
    model.eval()
    dets: List[Detection] = []
    try:
        with precision(dtype):
            for start in range(0, len(tiles), batch):
                chunk = tiles[start:start + batch]
                x = np.stack([t.voxels for t in chunk])[:, None].astype(dtype)
                for tile, (boxes, scores, stage) in zip(chunk, cascade_detect(model, Tensor(x))):
                    keep = scores >= thresh
                    world = boxes_to_world(boxes[keep], tile.origin, volume.spacing)
                    for row, s in zip(world, scores[keep]):
                        dets.append(Detection(Box3.from_zyxd(row), float(np.clip(s, 0.0, 1.0)),
                                              stage, volume.volume_id))
    finally:
        model.train(was_training)
    dets = filter_small(dets, data.min_diameter_mm, spacing=1.0)
    return nms_detections(dets, cfg.nms_iou)


def detect_volumes(model: Detector, volumes: Sequence[Volume], data: DataConfig = None,
                   score_thresh: Optional[float] = None) -> List[Detection]:
    out: List[Detection] = []
    for vol in volumes:
        out.extend(detect_volume(model, vol, data, score_thresh=score_thresh))
    return out


def evaluate(model: Detector, volumes: Sequence[Volume], annotations: Sequence[Annotation],
             data: DataConfig = None, size_range: Optional[Tuple[float, float]] = None) -> APReport:
    """Detect on every volume and score against ``annotations``."""
    dets = detect_volumes(model, volumes, data)
    return ap_report(dets, list(annotations), size_range=size_range)


def evaluate_detections(dets: Sequence[Detection], annotations: Sequence[Annotation]) -> Dict[str, APReport]:
    """Reports for all nodules and for the small-nodule subset (d < 8 mm)."""
    anns = list(annotations)
    return {"all": ap_report(dets, anns), "small": ap_report(dets, anns, size_range=SMALL_NODULE_MM)}


def infer(model: Detector, volume_path, out_csv, data: DataConfig = None,
          score_thresh: Optional[float] = None) -> List[Detection]:
    """Detect on one stored volume and write the world-frame detection CSV."""
    try:
        vol = read_volume(volume_path)
    except VolumeFormatError:
        raise
    except Exception as exc:
        raise VolumeFormatError(f"{volume_path}: {exc}") from exc
    dets = detect_volume(model, vol, data, score_thresh=score_thresh)
    dets.sort(key=lambda d: -d.score)
    write_detections_csv(out_csv, dets)
    return dets
