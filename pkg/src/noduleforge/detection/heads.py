"""Prediction heads: lateral projections, the anchor head and RoI refinement heads."""
from __future__ import annotations

from typing import Dict, Sequence, Tuple

import numpy as np

from ..functional import ShapeError
from ..nn import BatchNorm3d, Conv3d, Dropout, Linear, Module, Parameter
from ..tensor import Tensor


class Neck(Module):
    """Per-level 1x1x1 projection onto a common width, so one head serves every level.

    Batch normalisation keeps head inputs at unit scale whatever the backbone.
    """

    def __init__(self, level_widths: Dict[int, int], width: int, rng, batchnorm: bool = True):
        super().__init__()
        self.levels = sorted(level_widths)
        for lvl in self.levels:
            self.add_module(f"lat{lvl}", Conv3d(level_widths[lvl], width, rng, kernel=1))
            if batchnorm:
                self.add_module(f"norm{lvl}", BatchNorm3d(width))
        self.batchnorm = batchnorm

    def forward(self, pyramid) -> Dict[int, Tensor]:
        out = {}
        for lvl in self.levels:
            y = getattr(self, f"lat{lvl}")(pyramid.levels[lvl])
            out[lvl] = getattr(self, f"norm{lvl}")(y) if self.batchnorm else y
        return out


class RPNHead(Module):
    """Two-layer per-location network (1x1x1 convs) giving a score and 4 deltas per anchor."""

    def __init__(self, width: int, hidden: int, anchors_per_cell: int, rng,
                 zero_init: bool = False, final_std: float = 0.01):
        super().__init__()
        self.a = anchors_per_cell
        self.hidden = Conv3d(width, hidden, rng, kernel=1)
        self.cls = Conv3d(hidden, anchors_per_cell, rng, kernel=1)
        self.reg = Conv3d(hidden, 4 * anchors_per_cell, rng, kernel=1)
        for conv in (self.cls, self.reg):
            conv.weight.data = (np.zeros_like(conv.weight.data) if zero_init else
                                rng.standard_normal(conv.weight.shape).astype(conv.weight.dtype) * final_std)

    def forward(self, feat: Tensor) -> Tuple[Tensor, Tensor]:
        """Return logits ``(N, cells*A)`` and raw deltas ``(N, cells*A, 4)`` in anchor order."""
        if feat.ndim != 5 or feat.shape[1] != self.hidden.weight.shape[1]:
            raise ShapeError(f"RPN head expects (N, {self.hidden.weight.shape[1]}, D, H, W), got {feat.shape}")
        n, _, d, h, w = feat.shape
        z = self.hidden(feat).relu()
        logits = self.cls(z).transpose(0, 2, 3, 4, 1).reshape(n, -1)
        deltas = (self.reg(z).reshape(n, self.a, 4, d, h, w)
                  .transpose(0, 3, 4, 5, 1, 2).reshape(n, -1, 4))
        return logits, deltas


class RefineHead(Module):
    """Two fully connected layers over a flattened aligned RoI: 1 logit + 4 deltas."""

    def __init__(self, in_features: int, hidden: int, rng, dropout: float = 0.5,
                 drop_rng=None, zero_init: bool = False, final_std: float = 0.01):
        super().__init__()
        self.fc1 = Linear(in_features, hidden, rng)
        self.drop = Dropout(dropout, drop_rng if drop_rng is not None else rng)
        self.fc2 = Linear(hidden, 5, rng, zero=True)
        if not zero_init:
            self.fc2.weight.data = rng.standard_normal(self.fc2.weight.shape).astype(
                self.fc2.weight.dtype) * final_std

    def forward(self, rois: Tensor) -> Tuple[Tensor, Tensor]:
        flat = rois.reshape(rois.shape[0], -1)
        if flat.shape[1] != self.fc1.weight.shape[1]:
            raise ShapeError(f"refine head expects {self.fc1.weight.shape[1]} features, got {flat.shape[1]}")
        out = self.fc2(self.drop(self.fc1(flat).relu()))
        return out[:, 0], out[:, 1:5]
