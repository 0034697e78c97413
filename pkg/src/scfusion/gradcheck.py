"""Central finite differences, used as the oracle for every backward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

EPS = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-8


@dataclass(frozen=True)
class GradReport:
    name: str
    max_abs_err: float
    max_rel_err: float
    worst_index: int
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}  {self.name:<28s} max_rel={self.max_rel_err:.3e} "
            f"max_abs={self.max_abs_err:.3e} worst@{self.worst_index}"
        )


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """``g[i] = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`` for every index."""
    if eps <= 0:
        raise ParameterError("eps must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"f is not finite near index {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def check(
    analytic: np.ndarray,
    numeric: np.ndarray,
    rel_tol: float = REL_TOL,
    abs_floor: float = ABS_FLOOR,
    name: str = "",
) -> GradReport:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"{name}: analytic {analytic.shape} vs numeric {numeric.shape}")
    abs_err = np.abs(analytic - numeric).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor).reshape(-1)
    rel_err = abs_err / denom
    worst = int(np.argmax(rel_err)) if rel_err.size else 0
    max_rel = float(rel_err[worst]) if rel_err.size else 0.0
    return GradReport(
        name=name,
        max_abs_err=float(abs_err.max()) if abs_err.size else 0.0,
        max_rel_err=max_rel,
        worst_index=worst,
        passed=max_rel < rel_tol,
    )


def check_params(
    loss: Callable[[dict], float],
    params: dict,
    grads: dict,
    eps: float = EPS,
    rel_tol: float = REL_TOL,
    abs_floor: float = ABS_FLOOR,
    prefix: str = "",
) -> list[GradReport]:
    """Finite-difference every entry of ``params`` against ``grads``."""
    reports = []
    for name in sorted(params):
        def f(value, name=name):
            return loss({**params, name: value})

        numeric = finite_diff(f, params[name], eps)
        reports.append(check(grads[name], numeric, rel_tol, abs_floor, name=prefix + name))
    return reports
