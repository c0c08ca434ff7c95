"""Gradient-check cases for every differentiable op used by the detector.

Each case is ``(name, fn, inputs, kwargs)`` where ``inputs`` are arrays and
``kwargs`` go to :func:`noduleforge.gradcheck.gradcheck`. Inputs are drawn
away from kinks (ReLU at 0, smooth L1 at |d| = 1, clamped BCE) so central
differences stay valid.
"""
from __future__ import annotations

from typing import Iterator, Tuple

import numpy as np

from . import functional as F
from .detection import loss as L
from .detection.boxes import as_box_array
from .detection.roi import roi_align
from .functional import ConvSpec


def _away_from(values: np.ndarray, kink: float, gap: float) -> np.ndarray:
    """Push entries at least ``gap`` away from ``+-kink``."""
    mag = np.abs(values)
    near = np.abs(mag - kink) < gap
    mag = np.where(near, kink + np.sign(mag - kink + 1e-12) * gap, mag)
    return np.sign(values + 1e-12) * mag


def suite_cases(seed: int = 0) -> Iterator[Tuple[str, object, list, dict]]:
    rng = np.random.default_rng([seed, 101])

    for dil in (1, 2, 4):
        spec = ConvSpec.make(3, dilation=dil, padding=dil)
        yield (f"conv3d_dilation{dil}", lambda x, w, b, s=spec: F.conv3d(x, w, b, s),
               [rng.standard_normal((2, 2, 5, 5, 5)), rng.standard_normal((3, 2, 3, 3, 3)),
                rng.standard_normal(3)], {})
    strided = ConvSpec.make(3, stride=2, dilation=2, padding=(2, 1, 0))
    yield ("conv3d_stride2_mixed_pad", lambda x, w: F.conv3d(x, w, None, strided),
           [rng.standard_normal((1, 2, 7, 6, 7)), rng.standard_normal((2, 2, 3, 3, 3))], {})
    yield ("downsample", lambda x, w, b: F.downsample(x, w, b),
           [rng.standard_normal((2, 2, 4, 4, 4)), rng.standard_normal((3, 2, 3, 3, 3)),
            rng.standard_normal(3)], {})
    yield ("upsample_nearest", lambda x: F.upsample_nearest(x, 2),
           [rng.standard_normal((1, 2, 2, 3, 2))], {})
    yield ("linear", lambda x, w, b: F.linear(x, w, b),
           [rng.standard_normal((4, 6)), rng.standard_normal((5, 6)), rng.standard_normal(5)], {})

    def bn_train(x, g, b):
        return F.batch_norm(x, g, b, np.zeros(3), np.ones(3), training=True)

    def bn_eval(x, g, b):
        return F.batch_norm(x, g, b, np.full(3, 0.2), np.full(3, 1.5), training=False)

    bn_inputs = lambda: [rng.standard_normal((2, 3, 3, 3, 2)), 1.0 + rng.standard_normal(3) * 0.3,
                         rng.standard_normal(3)]
    yield ("batchnorm_train", bn_train, bn_inputs(), {})
    yield ("batchnorm_eval", bn_eval, bn_inputs(), {})

    boxes = np.array([[2.3, 2.9, 3.1, 2.5], [3.6, 2.2, 2.7, 3.4], [1.8, 3.3, 2.4, 1.7]])
    bidx = np.array([0, 1, 1])
    yield ("roi_align", lambda f: roi_align(f, boxes, 2, bidx),
           [rng.standard_normal((2, 2, 6, 6, 6))], {})

    yield ("relu", F.relu, [_away_from(rng.standard_normal((3, 4, 5)), 0.0, 0.05)], {})
    yield ("sigmoid", F.sigmoid, [rng.standard_normal((3, 4, 5)) * 2.0], {})
    drop_seed = int(rng.integers(1 << 30))
    yield ("dropout_fixed_mask",
           lambda x: F.dropout(x, 0.5, True, np.random.default_rng(drop_seed)),
           [rng.standard_normal((4, 8))], {})

    labels = np.array([1, 0, 0, 1, 0, 0, 0, 1, 0, 0], dtype=float)
    probs = rng.uniform(0.05, 0.95, size=10)
    yield ("cls_loss", lambda p: L.cls_loss(p, labels, w_pos=3.0, w_neg=1.0), [probs], {})
    yield ("cls_loss_auto_weight", lambda p: L.cls_loss(p, labels, L.LossConfig()), [probs], {})
    t_star = rng.standard_normal((6, 4))
    t = t_star + _away_from(rng.standard_normal((6, 4)) * 1.2, 1.0, 0.05)
    yield ("smooth_l1", L.smooth_l1, [t - t_star], {})
    yield ("reg_loss", lambda a: L.reg_loss(a, t_star), [t], {})
    tri = np.array([1, 0, -1, 1, 0, 0], dtype=float)
    yield ("total_loss", lambda p, a: L.total_loss(p, tri, a, t_star, L.LossConfig()),
           [rng.uniform(0.05, 0.95, size=6), t], {})
