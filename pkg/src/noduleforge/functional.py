"""Differentiable layer primitives used by the detector.

All spatial ops take feature maps laid out as ``(N, C, D, H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import NumericError, Tensor, as_tensor

IntOr3 = Union[int, Sequence[int]]


def _triple(v: IntOr3, name: str) -> Tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"{name} needs 3 entries, got {v}")
    return v


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the requested op."""


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 3-D convolution: kernel, stride, dilation and zero padding."""

    kernel_size: Tuple[int, int, int] = (3, 3, 3)
    stride: Tuple[int, int, int] = (1, 1, 1)
    dilation: Tuple[int, int, int] = (1, 1, 1)
    padding: Tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        for field in ("kernel_size", "stride", "dilation", "padding"):
            object.__setattr__(self, field, _triple(getattr(self, field), field))
        if any(k < 1 or k % 2 == 0 for k in self.kernel_size):
            raise ValueError(f"kernel sizes must be odd and positive, got {self.kernel_size}")
        if any(s < 1 for s in self.stride) or any(d < 1 for d in self.dilation):
            raise ValueError("stride and dilation must be positive")
        if any(p < 0 for p in self.padding):
            raise ValueError("padding must be non-negative")

    @classmethod
    def make(cls, kernel: IntOr3 = 3, stride: IntOr3 = 1, dilation: IntOr3 = 1,
             padding: Optional[IntOr3] = None) -> "ConvSpec":
        """Build a spec; ``padding=None`` selects same-style padding ``l*(k-1)/2``."""
        k, l = _triple(kernel, "kernel"), _triple(dilation, "dilation")
        if padding is None:
            padding = tuple(li * (ki - 1) // 2 for ki, li in zip(k, l))
        return cls(k, _triple(stride, "stride"), l, _triple(padding, "padding"))

    @property
    def span(self) -> Tuple[int, int, int]:
        """Extent covered by the dilated kernel along each axis."""
        return tuple(l * (k - 1) + 1 for k, l in zip(self.kernel_size, self.dilation))

    def output_shape(self, spatial: Sequence[int]) -> Tuple[int, int, int]:
        out = tuple((n + 2 * p - e) // s + 1
                    for n, p, e, s in zip(spatial, self.padding, self.span, self.stride))
        if any(o < 1 for o in out):
            raise ShapeError(f"input extents {tuple(spatial)} too small for {self}")
        return out


def effective_receptive_field(layers: Sequence) -> Tuple[int, int, int]:
    """Receptive field of a stack of stride-1 convolutions.

    ``layers`` holds :class:`ConvSpec` objects or ``(kernel, dilation)`` pairs.
    Each layer widens the field by ``(kernel - 1) * dilation``.
    """
    if not layers:
        raise ValueError("receptive field of an empty stack is undefined")
    rf = np.ones(3, dtype=np.int64)
    for layer in layers:
        if not isinstance(layer, ConvSpec):
            kernel, dilation = layer
            layer = ConvSpec.make(kernel, dilation=dilation)
        if layer.stride != (1, 1, 1):
            raise ValueError("receptive field calculator only handles stride-1 stacks")
        rf += (np.array(layer.kernel_size) - 1) * np.array(layer.dilation)
    return tuple(int(v) for v in rf)


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"{what} contains non-finite values")


def _tap_slices(spec: ConvSpec, out_shape, tap):
    return tuple(
        slice(t * l, t * l + s * (o - 1) + 1, s)
        for t, l, s, o in zip(tap, spec.dilation, spec.stride, out_shape)
    )


def conv3d(x, weight, bias=None, spec: Optional[ConvSpec] = None) -> Tensor:
    """Dilated 3-D cross-correlation with zero padding.

    ``out[n, o, p] = sum_{c, t} x[n, c, p*stride + t*dilation - pad] * w[o, c, t]``

    The strided window of every kernel tap is gathered into one column
    matrix, so forward and both gradients are single matrix products. The
    column matrix is kept for the weight gradient.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and kernel, got {x.shape} and {weight.shape}")
    n, c, *spatial = x.shape
    o, ck, *ksize = weight.shape
    if c != ck:
        raise ShapeError(f"kernel expects {ck} input channels, input has {c}")
    if spec is None:
        spec = ConvSpec.make(tuple(ksize))
    elif tuple(ksize) != spec.kernel_size:
        raise ShapeError(f"kernel extents {tuple(ksize)} disagree with spec {spec.kernel_size}")
    check_finite(x.data, "conv3d input")
    out_sp = spec.output_shape(spatial)
    pads = spec.padding
    dtype = np.result_type(x.dtype, weight.dtype)
    xt = x.data.transpose(1, 0, 2, 3, 4)
    if any(pads):
        xpt = np.zeros((c, n) + tuple(d + 2 * p for d, p in zip(spatial, pads)), dtype=dtype)
        xpt[(slice(None), slice(None)) + tuple(slice(p, p + d) for p, d in zip(pads, spatial))] = xt
    else:
        xpt = xt
    taps = list(np.ndindex(*spec.kernel_size))
    windows = [(slice(None), slice(None)) + _tap_slices(spec, out_sp, t) for t in taps]
    cols = np.empty((len(taps), c, n) + out_sp, dtype=dtype)
    for k, win in enumerate(windows):
        cols[k] = xpt[win]
    cols = cols.reshape(len(taps) * c, -1)
    # (o, c, kd, kh, kw) -> (o, taps * c), tap-major like ``cols``
    wm = weight.data.reshape(o, c, -1).transpose(0, 2, 1).reshape(o, -1).astype(dtype, copy=False)
    out_t = wm @ cols
    if bias is not None:
        bias = as_tensor(bias)
        out_t += bias.data.reshape(o, 1).astype(dtype, copy=False)
    out = np.ascontiguousarray(out_t.reshape((o, n) + out_sp).transpose(1, 0, 2, 3, 4))
    want_x = x.requires_grad
    xpt_shape = xpt.shape

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(o, -1)
        gw = (gt @ cols.T).reshape(o, len(taps), c).transpose(0, 2, 1).reshape(weight.shape)
        gx = None
        if want_x:
            gcols = (wm.T @ gt).reshape((len(taps), c, n) + out_sp)
            gxpt = np.zeros(xpt_shape, dtype=dtype)
            for k, win in enumerate(windows):
                gxpt[win] += gcols[k]
            crop = (slice(None), slice(None)) + tuple(slice(p, p + d) for p, d in zip(pads, spatial))
            gx = np.ascontiguousarray(gxpt[crop].transpose(1, 0, 2, 3, 4))
        grads = [gx, np.ascontiguousarray(gw)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, bw)


def downsample(x, weight, bias=None, factor: int = 2) -> Tensor:
    """Learned downsampling: a 3x3x3 convolution with stride ``factor``."""
    x = as_tensor(x)
    if factor < 2:
        raise ValueError("downsample factor must be at least 2")
    if any(d % factor for d in x.shape[2:]):
        raise ShapeError(f"spatial extents {x.shape[2:]} not divisible by {factor}")
    spec = ConvSpec.make(3, stride=factor, padding=1)
    return conv3d(x, weight, bias, spec)


def upsample_nearest(x, factor: int) -> Tensor:
    """Replicate every voxel ``factor`` times along each spatial axis."""
    x = as_tensor(x)
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        return x
    n, c, d, h, w = x.shape
    f = factor
    out = np.broadcast_to(x.data[:, :, :, None, :, None, :, None],
                          (n, c, d, f, h, f, w, f)).reshape(n, c, d * f, h * f, w * f)

    def bw(g):
        return (g.reshape(n, c, d, f, h, f, w, f).sum(axis=(3, 5, 7)),)

    return Tensor._from_op(out, (x,), bw)


def relu(x) -> Tensor:
    return as_tensor(x).relu()


def sigmoid(x) -> Tensor:
    return as_tensor(x).sigmoid()


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, in) and ``weight`` (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    a, w = x.data, weight.data
    out = a @ w.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    def bw(g):
        grads = [g @ w, g.T @ a]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, bw)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over batch and spatial axes.

    In training mode the running statistics are updated in place (unbiased
    variance), in eval mode they replace the batch statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    shape = (1, c) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    a = x.data
    g_ = gamma.data.reshape(shape)
    if training:
        m = a.size // c
        mean = a.mean(axis=axes, keepdims=True)
        centered = a - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c) * (m / max(m - 1, 1))

        def bw(g):
            dxhat = g * g_
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = inv_std * (dxhat - s1 / m - xhat * (s2 / m))
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).reshape(shape).astype(a.dtype)
        xhat = (a - running_mean.reshape(shape).astype(a.dtype)) * inv_std

        def bw(g):
            return g * g_ * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * g_ + beta.data.reshape(shape)
    return Tensor._from_op(out, (x, gamma, beta), bw)


def dropout(x, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity when not training or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))
