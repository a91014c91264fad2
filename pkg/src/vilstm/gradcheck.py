"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

FD_STEP = 1e-4
REL_FLOOR = 1e-5


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = FD_STEP,
                   indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``t.data``.

    ``t.data`` is perturbed in place and restored. When ``indices`` (flat
    positions) is given, only those entries are evaluated; the rest stay 0.
    """
    flat = t.data.reshape(-1)
    if not np.shares_memory(flat, t.data):
        raise ValueError("tensor data must be contiguous for in-place perturbation")
    out = np.zeros(t.data.size, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data.sum())
            flat[i] = orig - h
            fm = float(f().data.sum())
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    """Max over entries of ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    checked: int
    skipped: bool = False

    def passed(self, tol: float) -> bool:
        return self.skipped or self.max_rel_error < tol


def check_gradients(f: Callable[[], Tensor], tensors: dict[str, Tensor], h: float = FD_STEP,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> list[GradReport]:
    """Compare backprop gradients of ``f()`` against central differences.

    Tensors with ``requires_grad`` off are reported as skipped. With
    ``max_entries`` set, at most that many randomly chosen entries per tensor
    are differenced.
    """
    for t in tensors.values():
        t.grad = None
    loss = f()
    loss.backward()
    rng = rng or np.random.default_rng(0)
    reports = []
    for name, t in tensors.items():
        if not t.requires_grad:
            reports.append(GradReport(name, 0.0, 0, skipped=True))
            continue
        analytic = np.zeros(t.shape) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
        if max_entries is not None and t.size > max_entries:
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        else:
            idx = np.arange(t.size)
        numeric = numerical_grad(f, t, h, idx)
        err = relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx])
        reports.append(GradReport(name, err, len(idx)))
    return reports
