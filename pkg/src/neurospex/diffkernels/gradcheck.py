"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

FD_STEP = 1e-5


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: str = ""
    per_tensor: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor] | dict,
    tolerance: float = 1e-4,
    h: float = FD_STEP,
    max_per_tensor: int | None = 50,
    floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``fn()`` with central differences.

    ``fn`` must rebuild the graph from the current values of ``tensors`` on
    every call. Each tensor contributes every element, or a random subsample
    of ``max_per_tensor`` elements when it is larger. The relative error of an
    element is ``max(|a - n| - noise, 0) / max(|a|, |n|, floor)`` where
    ``noise = 4 * eps * max(|f|, 1) / h`` bounds the rounding error of the
    central difference itself. Without it a gradient that vanishes
    identically (a key bias under softmax, say) would fail on rounding alone.
    """
    named = tensors.items() if isinstance(tensors, dict) else ((f"t{i}", t) for i, t in enumerate(tensors))
    named = list(named)
    for _, t in named:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires double precision tensors")
        t.requires_grad = True
        t.grad = None

    out = fn()
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar output, got shape {out.shape}")
    out.backward()
    noise = 4 * np.finfo(np.float64).eps * max(abs(float(out.data)), 1.0) / h
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in named}

    rng = np.random.default_rng(seed)
    worst, worst_at, total = 0.0, "", 0
    per_tensor = {}
    for name, t in named:
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = rng.choice(flat.size, size=max_per_tensor, replace=False)
        tensor_worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[name].reshape(-1)[i]
            err = max(abs(a - numeric) - noise, 0.0) / max(abs(a), abs(numeric), floor)
            tensor_worst = max(tensor_worst, err)
            if err > worst:
                worst, worst_at = err, f"{name}[{i}]"
        per_tensor[name] = tensor_worst
        total += len(idx)
    return GradCheckReport(worst, total, tolerance, worst_at, per_tensor)
