"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad, precision


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tolerance: float
    passed: bool
    coords: int = 0
    seconds: float = 0.0


def _outputs(res) -> List[Tensor]:
    return list(res) if isinstance(res, (tuple, list)) else [res]


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence, seed: int = 0, tol: float = 1e-5,
              h: float = 1e-5, max_coords: int = 256, name: Optional[str] = None,
              wrt: Optional[Sequence[int]] = None) -> GradCheckReport:
    """Compare backprop gradients of ``fn`` with central differences.

    ``inputs`` are arrays or shape tuples (filled with standard normals). The
    scalar checked is ``sum_k <fn(...)_k, R_k>`` for fixed random ``R_k``.
    Every coordinate is probed when an input has at most ``max_coords``
    entries, otherwise ``max_coords`` coordinates are sampled. Relative error
    uses ``max(|a|, |b|, 1e-8)`` as denominator.
    """
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    arrays = []
    for item in inputs:
        if isinstance(item, tuple) and all(isinstance(v, (int, np.integer)) for v in item):
            arrays.append(rng.standard_normal(item))
        else:
            arrays.append(np.array(item, dtype=np.float64))
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    with precision("float64"):
        leaves = [Tensor(a.copy(), requires_grad=i in wrt) for i, a in enumerate(arrays)]
        outs = _outputs(fn(*leaves))
        projections = [rng.standard_normal(o.shape) for o in outs]
        loss = None
        for o, r in zip(outs, projections):
            term = (o * Tensor(r)).sum()
            loss = term if loss is None else loss + term
        loss.backward()

        worst, probed = 0.0, 0
        for i in wrt:
            base = arrays[i]
            analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(base)
            flat_idx = np.arange(base.size)
            if base.size > max_coords:
                flat_idx = rng.choice(base.size, size=max_coords, replace=False)
            for fi in flat_idx:
                idx = np.unravel_index(int(fi), base.shape)
                plus, minus = base.copy(), base.copy()
                plus[idx] += h
                minus[idx] -= h
                step = plus[idx] - minus[idx]
                with no_grad():
                    args_p = [Tensor(plus if j == i else arrays[j]) for j in range(len(arrays))]
                    args_m = [Tensor(minus if j == i else arrays[j]) for j in range(len(arrays))]
                    out_p, out_m = _outputs(fn(*args_p)), _outputs(fn(*args_m))
                numeric = 0.0
                for op, om, r in zip(out_p, out_m, projections):
                    numeric += float(np.sum(((op.data - om.data) / step) * r))
                a = float(analytic[idx])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
                probed += 1
    return GradCheckReport(name or getattr(fn, "__name__", "op"), worst, tol, worst <= tol,
                           probed, time.perf_counter() - started)


def gradient_suite(seeds: Sequence[int] = (0,), tol: float = 1e-5) -> List[GradCheckReport]:
    """Gradcheck every differentiable op the detector uses."""
    from .suite import suite_cases

    reports = []
    for seed in seeds:
        for case_name, fn, inputs, kwargs in suite_cases(seed):
            rep = gradcheck(fn, inputs, seed=seed, tol=tol, name=case_name, **kwargs)
            reports.append(rep)
    return reports


def format_reports(reports: Sequence[GradCheckReport]) -> str:
    lines = [f"{'op':<28}{'coords':>8}{'max_rel_err':>14}{'tol':>10}  status"]
    for r in reports:
        lines.append(f"{r.op_name:<28}{r.coords:>8}{r.max_rel_error:>14.3e}{r.tolerance:>10.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
