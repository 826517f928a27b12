from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    passed: bool
    tol: float
    n_checked: int

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel={self.max_rel_error:.3e} max_abs={self.max_abs_error:.3e} (tol {self.tol:g}, n={self.n_checked})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
    indices: Optional[np.ndarray] = None,
) -> GradCheckReport:
    """Compare the autodiff gradient of scalar ``f`` at ``x`` with central differences.

    ``x`` must be a leaf with ``requires_grad=True``. ``indices`` restricts the
    comparison to a subset of flat positions. The caller is responsible for
    keeping ``x`` at least ``step`` away from any kink of ``f``.
    """
    x.grad = None
    loss = f(x)
    loss.backward()
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices)
    numeric = np.empty(idx.size)
    with no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(x).item()
            flat[i] = orig - step
            fm = f(x).item()
            flat[i] = orig
            numeric[n] = (fp - fm) / (2 * step)
    a = analytic.reshape(-1)[idx]
    rel = relative_error(a, numeric)
    max_rel = float(rel.max()) if rel.size else 0.0
    max_abs = float(np.abs(a - numeric).max()) if rel.size else 0.0
    return GradCheckReport(max_rel, max_abs, max_rel < tol, tol, int(idx.size))
