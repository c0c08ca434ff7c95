"""Average precision for single-class cube detections.

Detections are pooled across volumes and ranked by score; each may only
match a ground truth from its own volume.
"""
from __future__ import annotations

import csv
import json
from fractions import Fraction
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .detection.boxes import Box3, Detection, as_box_array, iou3d, iou_matrix

__all__ = [
    "ConfusionCounts", "PRPoint", "PRCurve", "APReport", "MatchResult", "iou3d",
    "precision", "recall", "match", "pr_curve", "average_precision", "ap_report",
    "DEFAULT_THRESHOLDS",
]

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int


def precision(c: ConfusionCounts) -> float:
    """TP / (TP + FP); 1 when nothing was detected."""
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else 1.0


def recall(c: ConfusionCounts) -> float:
    """TP / (TP + FN); 0 when there is no ground truth."""
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0


@dataclass
class PRPoint:
    score_threshold: float
    precision: float
    recall: float
    tp: Optional[int] = None  # cumulative counts, kept so AP can be integrated exactly
    fp: Optional[int] = None


@dataclass
class PRCurve:
    points: List[PRPoint]
    iou_thresh: float = 0.5
    n_gt: int = 0

    @property
    def precisions(self) -> np.ndarray:
        return np.array([p.precision for p in self.points])

    @property
    def recalls(self) -> np.ndarray:
        return np.array([p.recall for p in self.points])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("threshold", "precision", "recall"))
            for p in self.points:
                w.writerow(tuple(repr(float(v)) for v in (p.score_threshold, p.precision, p.recall)))


@dataclass
class APReport:
    ap: float
    ap50: float
    ap75: float
    per_threshold: List[Tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
                "per_threshold": [{"iou": t, "ap": a} for t, a in self.per_threshold]}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "APReport":
        return cls(d["ap"], d["ap50"], d["ap75"], [(e["iou"], e["ap"]) for e in d["per_threshold"]])


@dataclass
class MatchResult:
    """Outcome per detection, in ranked (descending score) order."""

    order: np.ndarray
    scores: np.ndarray
    is_tp: np.ndarray
    ignored: np.ndarray
    n_gt: int
    unmatched_gt: int

    @property
    def counts(self) -> ConfusionCounts:
        used = ~self.ignored
        tp = int(self.is_tp[used].sum())
        return ConfusionCounts(tp, int(used.sum()) - tp, self.unmatched_gt)


def _records(items, with_scores: bool):
    """Normalise detections / ground truths to (boxes, groups, scores)."""
    boxes, groups, scores = [], [], []
    for it in items:
        if isinstance(it, Detection):
            boxes.append(it.box.zyxd)
            groups.append(it.volume_id)
            scores.append(it.score)
        elif isinstance(it, Box3):
            boxes.append(it.zyxd)
            groups.append("")
            scores.append(1.0)
        elif hasattr(it, "box") and hasattr(it, "volume_id"):
            boxes.append(it.box.zyxd)
            groups.append(it.volume_id)
            scores.append(getattr(it, "score", 1.0))
        else:
            raise TypeError(f"cannot evaluate object of type {type(it).__name__}")
    boxes = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    return boxes, np.array(groups, dtype=object), np.array(scores, dtype=np.float64)


def _in_range(d: np.ndarray, size_range) -> np.ndarray:
    if size_range is None:
        return np.ones(len(d), dtype=bool)
    lo, hi = size_range
    return (d >= lo) & (d < hi)


def match(dets: Sequence, gts: Sequence, iou_thresh: float = 0.5,
          size_range: Optional[Tuple[float, float]] = None) -> MatchResult:
    """Greedy matching in descending score order (ties keep input order).

    A detection is a true positive when its best-IoU still-unmatched ground
    truth in the same volume reaches ``iou_thresh``. With ``size_range``,
    ground truths outside ``[lo, hi)`` are ignored: detections matching only
    them, or unmatched detections outside the range, are left out.
    """
    db, dg, ds = _records(dets, True)
    gb, gg, _ = _records(gts, False)
    gt_ok = _in_range(gb[:, 3], size_range)
    det_ok = _in_range(db[:, 3], size_range)
    order = np.argsort(-ds, kind="stable")
    is_tp = np.zeros(len(db), dtype=bool)
    ignored = np.zeros(len(db), dtype=bool)
    taken = np.zeros(len(gb), dtype=bool)
    ious = iou_matrix(db, gb) if len(db) and len(gb) else np.zeros((len(db), len(gb)))
    same = dg[:, None] == gg[None, :] if len(db) and len(gb) else np.zeros((len(db), len(gb)), bool)
    for rank, i in enumerate(order):
        matched = False
        for want_ok in (True, False):
            cand = np.nonzero(same[i] & ~taken & (gt_ok == want_ok))[0]
            if not len(cand):
                continue
            j = cand[np.argmax(ious[i, cand])]
            if ious[i, j] >= iou_thresh:
                taken[j] = True
                is_tp[rank] = want_ok
                ignored[rank] = not want_ok
                matched = True
                break
        if not matched and not det_ok[i]:
            ignored[rank] = True
    n_gt = int(gt_ok.sum())
    return MatchResult(order, ds[order], is_tp, ignored, n_gt, int((gt_ok & ~taken).sum()))


def pr_curve(dets: Sequence, gts: Sequence, iou_thresh: float = 0.5,
             size_range: Optional[Tuple[float, float]] = None) -> PRCurve:
    """One point per distinct score, descending, from cumulative TP/FP counts."""
    m = match(dets, gts, iou_thresh, size_range)
    keep = ~m.ignored
    scores, tp = m.scores[keep], m.is_tp[keep]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    points = []
    for k in range(len(scores)):
        if k + 1 < len(scores) and scores[k + 1] == scores[k]:
            continue
        c = ConfusionCounts(int(ctp[k]), int(cfp[k]), m.n_gt - int(ctp[k]))
        points.append(PRPoint(float(scores[k]), precision(c), recall(c), c.tp, c.fp))
    return PRCurve(points, iou_thresh, m.n_gt)


def average_precision(curve: PRCurve) -> float:
    """Area under the monotone precision envelope (all-points interpolation)."""
    if not curve.points or curve.n_gt == 0:
        return 0.0
    if any(pt.tp is None for pt in curve.points):
        p, r = curve.precisions, curve.recalls
        env = np.maximum.accumulate(p[::-1])[::-1]
        steps = np.diff(np.concatenate([[0.0], r]))
        return float(np.sum(steps * env))
    # rational arithmetic on the counts, rounded once
    area, best, prev_tp = Fraction(0), Fraction(0), 0
    env = []
    for pt in reversed(curve.points):
        best = max(best, Fraction(pt.tp, pt.tp + pt.fp))
        env.append(best)
    for pt, e in zip(curve.points, reversed(env)):
        area += Fraction(pt.tp - prev_tp, curve.n_gt) * e
        prev_tp = pt.tp
    return float(area)


def ap_report(dets: Sequence, gts: Sequence, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
              size_range: Optional[Tuple[float, float]] = None) -> APReport:
    """AP at each IoU threshold; ``ap`` is their mean, ``ap50``/``ap75`` picked out."""
    per = [(float(t), average_precision(pr_curve(dets, gts, t, size_range))) for t in thresholds]
    lookup = dict(per)
    ap50 = lookup.get(0.5, average_precision(pr_curve(dets, gts, 0.5, size_range)))
    ap75 = lookup.get(0.75, average_precision(pr_curve(dets, gts, 0.75, size_range)))
    return APReport(float(np.mean([a for _, a in per])), ap50, ap75, per)
