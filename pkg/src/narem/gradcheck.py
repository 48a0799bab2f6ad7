"""Finite-difference validation of analytic gradients.

``grad_check`` perturbs randomly sampled coordinates of each parameter and
compares the central difference of a scalar loss against the gradient the
tape produced.  The loss callable must be pure and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from narem.autodiff import Tensor
from narem.optim import zero_gradients


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: list[tuple[str, tuple[int, ...], float]]  # (param name, coordinate, rel error)
    checked: int

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: list[Tensor],
    tolerance: float = 1e-4,
    samples_per_param: int = 5,
    h: float = 1e-5,
    seed: int = 0,
    raise_on_failure: bool = True,
) -> GradCheckReport:
    rng = np.random.Generator(np.random.PCG64(seed))
    zero_gradients(params)
    loss_fn().backward()
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}

    records: list[tuple[str, tuple[int, ...], float]] = []
    for p in params:
        flat_size = p.data.size
        n = min(samples_per_param, flat_size)
        coords = rng.choice(flat_size, size=n, replace=False)
        for flat in coords:
            idx = np.unravel_index(int(flat), p.data.shape)
            saved = p.data[idx]
            p.data[idx] = saved + h
            up = float(loss_fn().data)
            p.data[idx] = saved - h
            down = float(loss_fn().data)
            p.data[idx] = saved
            fd = (up - down) / (2.0 * h)
            an = float(analytic[id(p)][idx])
            rel = abs(fd - an) / max(abs(fd), abs(an), 1.0)
            records.append((p.name, idx, rel))

    records.sort(key=lambda r: -r[2])
    report = GradCheckReport(
        max_rel_error=records[0][2] if records else 0.0,
        worst=records[:5],
        checked=len(records),
    )
    if raise_on_failure and not report.ok(tolerance):
        lines = ", ".join(f"{n}{i}: {e:.2e}" for n, i, e in report.worst)
        raise AssertionError(f"gradient check failed (tol {tolerance}): {lines}")
    return report
