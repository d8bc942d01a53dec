"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    coords_checked: dict[str, int] = field(default_factory=dict)
    max_abs_grad: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def failures(self) -> list[str]:
        return [k for k, v in self.max_rel_error.items() if not v < self.tolerance]


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(forward: Callable[[], Tensor], inputs: Mapping[str, Tensor] | list,
               tolerance: float = 1e-4, h: float = 1e-5, max_coords: int = 64,
               seed: int = 0, coords: Mapping[str, np.ndarray] | None = None) -> GradCheckReport:
    """Compare backward() against central differences for every tensor in ``inputs``.

    Tensors with more than ``max_coords`` entries are checked on a random
    subset of ``max_coords`` coordinates. ``coords`` instead names the flat
    coordinates to check per tensor; tensors it omits are skipped.
    """
    if not isinstance(inputs, Mapping):
        inputs = {f"input{i}": t for i, t in enumerate(inputs)}
    for t in inputs.values():
        if not np.all(np.isfinite(t.data)):
            raise ValueError("grad_check inputs must be finite")
        t.requires_grad = True
        t.grad = None

    out = forward()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued forward")
    out.backward()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for name, t in inputs.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        size = t.data.size
        if coords is not None:
            chosen = np.asarray(coords.get(name, ()), dtype=np.int64)
            if not len(chosen):
                continue
        else:
            chosen = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
        flat = t.data.reshape(-1)
        numeric = np.empty(len(chosen))
        with no_grad():
            for i, c in enumerate(chosen):
                orig = flat[c]
                flat[c] = orig + h
                fp = float(forward().data)
                flat[c] = orig - h
                fm = float(forward().data)
                flat[c] = orig
                numeric[i] = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[chosen]
        err = relative_error(a, numeric)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
        report.coords_checked[name] = len(chosen)
        report.max_abs_grad[name] = float(np.abs(a).max()) if a.size else 0.0
    return report
