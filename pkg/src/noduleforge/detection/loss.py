"""Composite detection loss: weighted BCE for scores, smooth L1 for boxes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from ..tensor import Tensor, _sigmoid, as_tensor


@dataclass
class LossConfig:
    lam: float = 0.5
    pos_iou: float = 0.5
    neg_iou: float = 0.2
    w_pos: Optional[float] = None  # None: clamp(N_neg / N_pos, 1, 50) per batch
    w_neg: float = 1.0
    cascade_ious: Tuple[float, ...] = (0.5, 0.6, 0.7)
    eps: float = 1e-7

    def __post_init__(self):
        self.cascade_ious = tuple(float(v) for v in self.cascade_ious)
        self.validate()

    def validate(self) -> "LossConfig":
        if not 0.0 <= self.neg_iou < self.pos_iou <= 1.0:
            raise ValueError(f"need 0 <= neg_iou < pos_iou <= 1, got {self.neg_iou}, {self.pos_iou}")
        if not self.cascade_ious:
            raise ValueError("cascade_ious must not be empty")
        if any(b <= a for a, b in zip(self.cascade_ious, self.cascade_ious[1:])):
            raise ValueError(f"cascade_ious must strictly increase: {self.cascade_ious}")
        return self

    def class_weights(self, n_pos: int, n_neg: int) -> Tuple[float, float]:
        if self.w_pos is not None:
            return float(self.w_pos), float(self.w_neg)
        ratio = n_neg / n_pos if n_pos else 1.0
        return float(np.clip(ratio, 1.0, 50.0)), float(self.w_neg)


def weighted_bce(p, target, weight, eps: float = 1e-7) -> Tensor:
    """Elementwise ``-w [t log p + (1 - t) log(1 - p)]`` with ``p`` clamped to [eps, 1-eps].

    Entries whose ``p`` was clamped pass no gradient.
    """
    p = as_tensor(p)
    t = np.asarray(target, dtype=p.dtype)
    w = np.asarray(weight, dtype=p.dtype)
    pc = np.clip(p.data, eps, 1.0 - eps)
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)
    out = -w * (t * np.log(pc) + (1.0 - t) * np.log1p(-pc))

    def bw(g):
        return (-g * w * (t / pc - (1.0 - t) / (1.0 - pc)) * inside,)

    return Tensor._from_op(np.asarray(out), (p,), bw)


def weighted_bce_logits(z, target, weight) -> Tensor:
    """``weighted_bce(sigmoid(z), ...)`` evaluated stably from logits, without clamping.

    The gradient ``w (sigmoid(z) - t)`` never vanishes for a confidently wrong
    logit, unlike the clamped probability form.
    """
    z = as_tensor(z)
    t = np.asarray(target, dtype=z.dtype)
    w = np.asarray(weight, dtype=z.dtype)
    a = z.data
    softplus = np.maximum(a, 0) + np.log1p(np.exp(-np.abs(a)))
    out = w * (softplus - t * a)

    def bw(g):
        return (g * w * (_sigmoid(a) - t),)

    return Tensor._from_op(np.asarray(out), (z,), bw)


def smooth_l1(delta) -> Tensor:
    """``0.5 d^2`` for ``|d| < 1``, ``|d| - 0.5`` otherwise."""
    delta = as_tensor(delta)
    d = delta.data
    small = np.abs(d) < 1.0
    out = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)

    def bw(g):
        return (g * np.where(small, d, np.sign(d)),)

    return Tensor._from_op(out, (delta,), bw)


def cls_loss(p, p_star, cfg: LossConfig = None, w_pos: float = None, w_neg: float = None,
             from_logits: bool = False) -> Tensor:
    """Mean weighted BCE over the given (non-ignored) anchors.

    With ``from_logits`` the first argument holds logits rather than probabilities.
    """
    cfg = cfg or LossConfig(w_pos=1.0)
    p = as_tensor(p)
    t = np.asarray(p_star, dtype=p.dtype).reshape(p.shape)
    if w_pos is None or w_neg is None:
        auto = cfg.class_weights(int((t == 1).sum()), int((t == 0).sum()))
        w_pos = auto[0] if w_pos is None else w_pos
        w_neg = auto[1] if w_neg is None else w_neg
    w = np.where(t == 1, w_pos, w_neg)
    if from_logits:
        return weighted_bce_logits(p, t, w).mean()
    return weighted_bce(p, t, w, cfg.eps).mean()


def reg_loss(t, t_star) -> Tensor:
    """Sum of smooth L1 over all coordinates of all rows."""
    t = as_tensor(t)
    return smooth_l1(t - Tensor(np.asarray(t_star, dtype=t.dtype))).sum()


def total_loss(p, p_star, t, t_star, cfg: LossConfig = None, from_logits: bool = False) -> Tensor:
    """``lam * L_cls + p* L_reg`` reduced over a batch of anchors.

    ``p_star`` holds 1 (positive), 0 (negative) or -1 (ignored). The
    classification term averages over positives and negatives; the regression
    term averages over positives and is zero without positives.
    """
    cfg = cfg or LossConfig()
    p = as_tensor(p)
    labels = np.asarray(p_star).reshape(-1)
    used = np.nonzero(labels >= 0)[0]
    pos = np.nonzero(labels == 1)[0]
    flat_p = p.reshape(-1)
    if len(used):
        loss = cls_loss(flat_p[used], labels[used], cfg, from_logits=from_logits) * cfg.lam
    else:
        loss = Tensor(np.zeros((), dtype=p.dtype))
    if len(pos):
        t = as_tensor(t).reshape(-1, 4)
        ts = np.asarray(t_star, dtype=p.dtype).reshape(-1, 4)
        loss = loss + reg_loss(t[pos], ts[pos]) * (1.0 / len(pos))
    return loss
