"""Parameter containers on top of the functional layer."""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import Tensor, default_dtype


def Parameter(data: np.ndarray, name: Optional[str] = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True, name=name)


class Module:
    """Ordered tree of parameters, buffers and child modules.

    Attribute assignment registers tensors with ``requires_grad`` as
    parameters and ``Module`` instances as children, so dotted names follow
    attribute names (``stage1.stream0.block0.conv.weight``).
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Module):
            self._modules[key] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        object.__setattr__(self, key, value)

    def add_module(self, name: str, module: "Module") -> "Module":
        setattr(self, name, module)
        return module

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for prefix, mod in self.named_modules():
            for name, p in mod._params.items():
                yield (f"{prefix}.{name}" if prefix else name), p

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for prefix, mod in self.named_modules():
            for name, b in mod._buffers.items():
                yield (f"{prefix}.{name}" if prefix else name), b

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = OrderedDict((k, p.data) for k, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = [k for k in list(own) + list(bufs) if k not in state]
        if strict and missing:
            raise KeyError(f"state is missing entries: {missing[:5]}")
        for k, p in own.items():
            if k in state:
                if state[k].shape != p.shape:
                    raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
                p.data = np.asarray(state[k], dtype=p.dtype).copy()
        for k, b in bufs.items():
            if k in state:
                b[...] = state[k]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, kernel: int = 3,
                 stride: int = 1, dilation: int = 1, bias: bool = True):
        super().__init__()
        self.spec = F.ConvSpec.make(kernel, stride=stride, dilation=dilation)
        self.weight = Parameter(kaiming(rng, (cout, cin) + (kernel,) * 3, cin * kernel ** 3))
        if bias:
            self.bias = Parameter(np.zeros(cout))
        else:
            self.bias = None

    def forward(self, x):
        return F.conv3d(x, self.weight, self.bias, self.spec)


class BatchNorm3d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, zero: bool = False):
        super().__init__()
        w = np.zeros((fout, fin)) if zero else kaiming(rng, (fout, fin), fin)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(fout))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate, self.rng = rate, rng

    def forward(self, x):
        return F.dropout(x, self.rate, self.training, self.rng)


class ConvBlock(Module):
    """conv -> optional batchnorm -> relu."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dilation: int = 1,
                 stride: int = 1, batchnorm: bool = True, kernel: int = 3):
        super().__init__()
        self.conv = Conv3d(cin, cout, rng, kernel=kernel, stride=stride, dilation=dilation)
        self.bn = BatchNorm3d(cout) if batchnorm else None

    def forward(self, x):
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        return y.relu()
