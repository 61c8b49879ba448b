"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, backward, new_tape, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    analytic: dict = field(default_factory=dict)
    numeric: dict = field(default_factory=dict)
    tol: float = 1e-6

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if not e < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    """|a - b| / max(|a|, |b|), with ``floor`` guarding exact zeros."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(f: Callable[[], Tensor], params: list[Tensor], h: float = 1e-5, tol: float = 1e-6,
               floor: float = 1e-10) -> GradCheckReport:
    """Compare ``backward`` gradients with central differences.

    ``f`` rebuilds the graph from ``params`` on every call and must be
    deterministic (freeze any random draws it uses).
    """
    for p in params:
        p.grad = None
    new_tape()
    backward(f())
    report = GradCheckReport(tol=tol)
    for k, p in enumerate(params):
        key = p.name or f"param{k}"
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        # perturb in place, so the flat view must alias p.data
        if not p.data.flags.c_contiguous:
            p.data = p.data.copy()
        flat = p.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
        err = rel_error(analytic, numeric, floor)
        report.max_rel_error[key] = float(err.max()) if err.size else 0.0
        report.analytic[key] = analytic
        report.numeric[key] = numeric
    return report
