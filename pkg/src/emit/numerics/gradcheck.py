"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Parameter, Tape, Tensor


class NonDeterministicClosure(RuntimeError):
    pass


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    per_param: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps exact-zero gradients (which central differences only
    resolve to roundoff, about ulp(loss) / epsilon) from reading as large
    relative errors; below it the comparison is effectively absolute.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Parameter],
    epsilon: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must be deterministic (no dropout, fixed mask plan, fixed
    batch) and is re-evaluated twice per checked coordinate. At most
    ``max_coords`` coordinates per parameter are checked, picked at random.
    """
    for p in params.values():
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires 64-bit parameters")
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    baseline = loss.item()
    if loss_fn().item() != baseline:
        raise NonDeterministicClosure("two baseline evaluations of the loss differ")
    tape.backward(loss)

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    n_checked = 0
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for k in coords:
            original = flat[k]
            flat[k] = original + epsilon
            up = loss_fn().item()
            flat[k] = original - epsilon
            down = loss_fn().item()
            flat[k] = original
            numeric = (up - down) / (2.0 * epsilon)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[k]), numeric, floor))
            n_checked += 1
        per_param[name] = worst
    worst_name = max(per_param, key=per_param.get) if per_param else ""
    return GradCheckResult(per_param.get(worst_name, 0.0), worst_name, per_param, n_checked)
