"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_param: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def finite_difference_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-5,
    names: Sequence[str] = None,
    scale_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare ``fn``'s analytic gradients with central differences.

    ``fn`` must rebuild the graph from the current parameter values on every
    call and be deterministic. The error for one parameter tensor is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``;
    the report carries the worst tensor.

    ``floor`` is the larger of ``scale_floor`` and the gradient size a central
    difference cannot resolve to ``tolerance``: ten rounding units of ``fn``
    divided by ``epsilon * tolerance``. Without it a gradient that is exactly
    zero (a bias feeding batch norm, say) would be compared against pure
    roundoff in the numeric estimate.
    """
    names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]
    for p in params:
        p.zero_grad()
    base = fn()
    base.backward()
    noise = 10 * np.finfo(np.float64).eps * max(abs(base.item()), 1.0) / epsilon
    floor = max(scale_floor, noise / tolerance)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    per_param = {}
    for name, p, a in zip(names, params, analytic):
        numeric = np.empty(p.shape)
        flat = p.data.reshape(-1)
        out = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = fn().item()
            flat[i] = orig - epsilon
            down = fn().item()
            flat[i] = orig
            out[i] = (up - down) / (2 * epsilon)
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
        per_param[name] = float(np.abs(a - numeric).max(initial=0.0) / scale)
    for p in params:
        p.zero_grad()
    worst = max(per_param.values(), default=0.0)
    return GradCheckReport(worst, tolerance, per_param)
