"""Quantisation-free cropping of cubic regions by trilinear sampling."""
from __future__ import annotations

from typing import Optional

import numpy as np
import scipy.sparse as sp

from ..tensor import Tensor, as_tensor
from .boxes import Box3, as_box_array


def _interp_matrix(boxes: np.ndarray, batch_idx: np.ndarray, spatial, out_size: int,
                   batch: int) -> sp.csr_matrix:
    """Sparse (points x voxels) matrix of trilinear weights.

    Sample ``i`` of a box along one axis sits at ``c - d/2 + (i + 0.5) d / s``
    in cell coordinates; cell ``k`` has its centre at ``k + 0.5``. Corners
    outside the map contribute nothing.
    """
    s = out_size
    r = len(boxes)
    offs = (np.arange(s) + 0.5) / s - 0.5
    # (R, 3, s) positions shifted so that integers land on cell centres
    pos = boxes[:, :3, None] + offs[None, None, :] * boxes[:, 3, None, None] - 0.5
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    rows, cols, vals = [], [], []
    point_ids = np.arange(r * s ** 3).reshape(r, s, s, s)
    d_, h_, w_ = spatial
    for cz in (0, 1):
        for cy in (0, 1):
            for cx in (0, 1):
                iz = lo[:, 0, :, None, None] + cz
                iy = lo[:, 1, None, :, None] + cy
                ix = lo[:, 2, None, None, :] + cx
                wz = frac[:, 0, :, None, None] if cz else 1.0 - frac[:, 0, :, None, None]
                wy = frac[:, 1, None, :, None] if cy else 1.0 - frac[:, 1, None, :, None]
                wx = frac[:, 2, None, None, :] if cx else 1.0 - frac[:, 2, None, None, :]
                weight = np.broadcast_to(wz * wy * wx, (r, s, s, s))
                valid = ((iz >= 0) & (iz < d_)) & ((iy >= 0) & (iy < h_)) & ((ix >= 0) & (ix < w_))
                valid = np.broadcast_to(valid, (r, s, s, s)) & (weight != 0)
                lin = ((batch_idx[:, None, None, None] * d_ + iz) * h_ + iy) * w_ + ix
                lin = np.broadcast_to(lin, (r, s, s, s))
                rows.append(point_ids[valid])
                cols.append(lin[valid])
                vals.append(weight[valid])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(r * s ** 3, batch * d_ * h_ * w_))


def roi_align(features, boxes, out_size: int, batch_index: Optional[np.ndarray] = None) -> Tensor:
    """Crop ``boxes`` (feature-cell frame) from ``features`` onto an ``s^3`` grid.

    ``features`` is ``(C, D, H, W)`` or ``(N, C, D, H, W)``; the result is
    ``(R, C, s, s, s)``, or ``(C, s, s, s)`` when a single :class:`Box3` is
    given. Differentiable with respect to ``features``.
    """
    features = as_tensor(features)
    single = isinstance(boxes, Box3)
    b = as_box_array(boxes)
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    if (b[:, 3] <= 0).any():
        raise ValueError("roi_align needs positive box diameters")
    feats = features.data
    squeeze_batch = feats.ndim == 4
    if squeeze_batch:
        feats = feats[None]
    n, c = feats.shape[:2]
    spatial = feats.shape[2:]
    bidx = np.zeros(len(b), dtype=np.int64) if batch_index is None else np.asarray(batch_index)
    m = _interp_matrix(b, bidx, spatial, out_size, n)
    flat = feats.transpose(1, 0, 2, 3, 4).reshape(c, -1)
    out = np.asarray((m @ flat.T)).reshape(len(b), out_size, out_size, out_size, c)
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3)).astype(feats.dtype, copy=False)
    in_shape = features.shape

    def bw(g):
        gp = g.transpose(0, 2, 3, 4, 1).reshape(-1, c)
        gflat = np.asarray(m.T @ gp).T.reshape((c, n) + tuple(spatial))
        gf = gflat.transpose(1, 0, 2, 3, 4).astype(feats.dtype, copy=False)
        return (gf.reshape(in_shape),)

    res = Tensor._from_op(out, (features,), bw)
    return res[0] if single else res
