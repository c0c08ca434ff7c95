"""Detector assembly: backbone -> neck -> anchor head -> cascade of refinement heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..backbone import BackboneConfig, build_backbone, forward as backbone_forward
from ..nn import Module
from ..tensor import Tensor, concat, no_grad
from .anchors import IGNORED, NEGATIVE, POSITIVE, AnchorSet, assign, generate_anchors
from .boxes import as_box_array, decode, encode, iou_matrix, nms
from .heads import Neck, RefineHead, RPNHead
from .loss import LossConfig, total_loss
from .roi import roi_align


@dataclass
class DetectConfig:
    anchor_scales: Dict[int, Tuple[float, ...]] = field(
        default_factory=lambda: {1: (4.0, 6.0), 2: (8.5, 12.0)})
    head_width: int = 16
    head_hidden: int = 32
    roi_level: int = 1
    roi_size: int = 4
    refine_hidden: int = 64
    dropout: float = 0.5
    top_k: int = 128
    proposal_nms_iou: float = 0.5
    max_proposals: int = 32
    nms_iou: float = 0.25
    score_thresh: float = 0.05
    delta_scale: Tuple[float, float, float, float] = (0.1, 0.1, 0.1, 0.2)
    neg_ratio: float = 4.0
    min_negatives: int = 16
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        self.anchor_scales = {int(k): tuple(float(s) for s in v) for k, v in self.anchor_scales.items()}
        counts = {len(v) for v in self.anchor_scales.values()}
        if len(counts) != 1 or 0 in counts:
            raise ValueError("every anchor level needs the same, non-zero number of scales")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.delta_scale = tuple(float(v) for v in self.delta_scale)

    @property
    def n_stages(self) -> int:
        return len(self.loss.cascade_ious)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchor_scales"] = {str(k): list(v) for k, v in self.anchor_scales.items()}
        d["delta_scale"] = list(self.delta_scale)
        d["loss"]["cascade_ious"] = list(self.loss.cascade_ious)
        if d["loss"]["w_pos"] is None:
            del d["loss"]["w_pos"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        return cls(**d)


class Detector(Module):
    def __init__(self, backbone_cfg: BackboneConfig, cfg: DetectConfig, seed: int = 0):
        super().__init__()
        self.backbone_cfg, self.cfg = backbone_cfg, cfg
        self.backbone = build_backbone(backbone_cfg, seed)
        rng = np.random.default_rng([seed, 1])
        self.drop_rng = np.random.default_rng([seed, 2])
        widths = backbone_cfg.widths
        levels = sorted(set(cfg.anchor_scales) | {cfg.roi_level})
        self.neck = Neck({lvl: widths[lvl] for lvl in levels}, cfg.head_width, rng)
        self.rpn = RPNHead(cfg.head_width, cfg.head_hidden,
                           len(next(iter(cfg.anchor_scales.values()))), rng)
        self.n_refine = cfg.n_stages - 1
        for s in range(1, cfg.n_stages):
            self.add_module(f"refine{s}", RefineHead(cfg.head_width * cfg.roi_size ** 3,
                                                     cfg.refine_hidden, rng, cfg.dropout,
                                                     drop_rng=self.drop_rng))
        self._anchor_cache: Dict[tuple, AnchorSet] = {}

    def refine_heads(self) -> List[RefineHead]:
        return [getattr(self, f"refine{s}") for s in range(1, self.n_refine + 1)]

    def anchors_for(self, spatial: Sequence[int]) -> AnchorSet:
        key = tuple(spatial)
        if key not in self._anchor_cache:
            grids = {lvl: tuple(n // 2 ** lvl for n in spatial) for lvl in self.cfg.anchor_scales}
            self._anchor_cache[key] = generate_anchors(grids, self.cfg.anchor_scales)
        return self._anchor_cache[key]

    def features(self, x: Tensor) -> Dict[int, Tensor]:
        return self.neck(backbone_forward(self.backbone, x))

    def rpn_outputs(self, feats: Dict[int, Tensor]) -> Tuple[Tensor, Tensor]:
        outs = [self.rpn(feats[lvl]) for lvl in sorted(self.cfg.anchor_scales)]
        if len(outs) == 1:
            return outs[0]
        return concat([o[0] for o in outs], axis=1), concat([o[1] for o in outs], axis=1)

    def refine(self, head: RefineHead, feats: Dict[int, Tensor], rois: np.ndarray,
               batch_idx: np.ndarray) -> Tuple[Tensor, Tensor]:
        stride = 2 ** self.cfg.roi_level
        cell = rois / stride
        crops = roi_align(feats[self.cfg.roi_level], cell, self.cfg.roi_size, batch_idx)
        return head(crops)


def _proposals(cfg: DetectConfig, scores: np.ndarray, boxes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Top-K by score, then NMS, capped at ``max_proposals``."""
    order = np.argsort(-scores, kind="stable")[: cfg.top_k]
    keep = nms(boxes[order], scores[order], cfg.proposal_nms_iou, cfg.max_proposals)
    sel = order[keep]
    return boxes[sel], scores[sel]


def _valid_boxes(boxes: np.ndarray) -> np.ndarray:
    boxes = boxes.copy()
    boxes[:, 3] = np.clip(boxes[:, 3], 0.5, 256.0)
    return boxes


def cascade_detect(model: Detector, x, n_stages: Optional[int] = None) -> List[Tuple[np.ndarray, np.ndarray, int]]:
    """Run the detector on a batch; returns ``(boxes, scores, stage)`` per batch item.

    Stage 0 proposals are the top-K decoded anchors after NMS. Each later
    stage re-crops its input boxes, re-scores and re-decodes them; the
    final stage's scores are reported. Boxes are in the input voxel frame.
    """
    cfg = model.cfg
    n_stages = cfg.n_stages if n_stages is None else n_stages
    if n_stages < 1:
        raise ValueError("cascade needs at least one stage")
    x = x if isinstance(x, Tensor) else Tensor(x)
    scale = np.asarray(cfg.delta_scale)
    with no_grad():
        feats = model.features(x)
        if not feats:
            raise ValueError("empty pyramid")
        logits, raw = model.rpn_outputs(feats)
        anchors = model.anchors_for(x.shape[2:])
        scores_all = 1.0 / (1.0 + np.exp(-logits.data.astype(np.float64)))
        boxes_by_item, scores_by_item = [], []
        for i in range(x.shape[0]):
            boxes = _valid_boxes(decode(raw.data[i].astype(np.float64) * scale, anchors.boxes))
            b, s = _proposals(cfg, scores_all[i], boxes)
            boxes_by_item.append(b)
            scores_by_item.append(s)
        heads = model.refine_heads()[: n_stages - 1]
        for head in heads:
            counts = [len(b) for b in boxes_by_item]
            if sum(counts) == 0:
                break
            rois = np.concatenate(boxes_by_item)
            bidx = np.repeat(np.arange(len(counts)), counts)
            logit, delta = model.refine(head, feats, rois, bidx)
            new_boxes = _valid_boxes(decode(delta.data.astype(np.float64) * scale, rois))
            new_scores = 1.0 / (1.0 + np.exp(-logit.data.astype(np.float64)))
            bounds = np.cumsum([0] + counts)
            boxes_by_item = [new_boxes[bounds[k]:bounds[k + 1]] for k in range(len(counts))]
            scores_by_item = [new_scores[bounds[k]:bounds[k + 1]] for k in range(len(counts))]
    results = []
    for b, s in zip(boxes_by_item, scores_by_item):
        keep = s >= cfg.score_thresh
        b, s = b[keep], s[keep]
        k = nms(b, s, cfg.nms_iou)
        results.append((b[k], s[k], n_stages - 1))
    return results


def _sample_negatives(labels: np.ndarray, scores: np.ndarray, n_pos: int, cfg: DetectConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """Keep at most ``neg_ratio * n_pos`` negatives: half hardest, half random."""
    neg = np.nonzero(labels == NEGATIVE)[0]
    cap = max(int(cfg.neg_ratio * n_pos), cfg.min_negatives)
    if len(neg) <= cap:
        return labels
    n_hard = cap // 2
    hard = neg[np.argsort(-scores[neg], kind="stable")[:n_hard]]
    rest = np.setdiff1d(neg, hard, assume_unique=True)
    rand = rng.choice(rest, size=cap - n_hard, replace=False)
    out = labels.copy()
    out[neg] = IGNORED
    out[hard] = NEGATIVE
    out[rand] = NEGATIVE
    return out


def cascade_loss(model: Detector, x: Tensor, gts: Sequence[np.ndarray], rng: np.random.Generator,
                 n_stages: Optional[int] = None) -> Tuple[Tensor, Dict[str, float]]:
    """Training loss summed over the anchor stage and every refinement stage."""
    cfg = model.cfg
    n_stages = cfg.n_stages if n_stages is None else n_stages
    scale = np.asarray(cfg.delta_scale)
    x = x if isinstance(x, Tensor) else Tensor(x)
    feats = model.features(x)
    logits, raw = model.rpn_outputs(feats)
    anchors = model.anchors_for(x.shape[2:])
    gts = [as_box_array(g) for g in gts]

    sel_b, sel_a, sel_lab, sel_t = [], [], [], []
    for i, gt in enumerate(gts):
        asg = assign(anchors, gt, cfg.loss.pos_iou, cfg.loss.neg_iou)
        pos = asg.positives
        labels = _sample_negatives(asg.labels, logits.data[i], len(pos), cfg, rng)
        used = np.nonzero(labels >= 0)[0]
        t = np.zeros((len(used), 4))
        is_pos = labels[used] == POSITIVE
        if is_pos.any():
            t[is_pos] = encode(gt[asg.matched_gt[used[is_pos]]], anchors.boxes[used[is_pos]]) / scale
        sel_b.append(np.full(len(used), i))
        sel_a.append(used)
        sel_lab.append(labels[used])
        sel_t.append(t)
    sb, sa = np.concatenate(sel_b), np.concatenate(sel_a)
    lab = np.concatenate(sel_lab)
    loss = total_loss(logits[sb, sa], lab, raw[sb, sa], np.concatenate(sel_t), cfg.loss, from_logits=True)
    stats = {"rpn": float(loss.data)}

    scores_all = 1.0 / (1.0 + np.exp(-logits.data.astype(np.float64)))
    props = []
    for i, gt in enumerate(gts):
        boxes = _valid_boxes(decode(raw.data[i].astype(np.float64) * scale, anchors.boxes))
        b, _ = _proposals(cfg, scores_all[i], boxes)
        props.append(np.concatenate([b, gt]) if len(gt) else b)

    for s, head in enumerate(model.refine_heads()[: n_stages - 1], start=1):
        thr = cfg.loss.cascade_ious[s]
        counts = [len(b) for b in props]
        if sum(counts) == 0:
            break
        rois = np.concatenate(props)
        bidx = np.repeat(np.arange(len(counts)), counts)
        labels = np.full(len(rois), NEGATIVE)
        targets = np.zeros((len(rois), 4))
        bounds = np.cumsum([0] + counts)
        for i, gt in enumerate(gts):
            lo, hi = bounds[i], bounds[i + 1]
            if not len(gt) or hi == lo:
                continue
            ious = iou_matrix(rois[lo:hi], gt)
            best, arg = ious.max(axis=1), ious.argmax(axis=1)
            lab_i = np.where(best >= thr, POSITIVE, np.where(best < cfg.loss.neg_iou, NEGATIVE, IGNORED))
            labels[lo:hi] = lab_i
            pos = np.nonzero(lab_i == POSITIVE)[0]
            if len(pos):
                targets[lo + pos] = encode(gt[arg[pos]], rois[lo + pos]) / scale
        logit, delta = model.refine(head, feats, rois, bidx)
        stage_loss = total_loss(logit, labels, delta, targets, cfg.loss, from_logits=True)
        stats[f"stage{s}"] = float(stage_loss.data)
        loss = loss + stage_loss
        new = _valid_boxes(decode(delta.data.astype(np.float64) * scale, rois))
        props = [new[bounds[k]:bounds[k + 1]] for k in range(len(counts))]
    return loss, stats
