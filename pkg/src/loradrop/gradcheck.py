"""Finite-difference gradient oracle and certification reports."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor, backward, no_grad, zero_grads

DEFAULT_FD_STEP = 1e-5


@dataclass
class GradCheckReport:
    parameter_name: str
    max_rel_error: float
    max_abs_error: float
    passed: bool

    def __str__(self) -> str:  # pragma: no cover
        tag = "ok" if self.passed else "FAIL"
        return f"[{tag}] {self.parameter_name}: rel={self.max_rel_error:.3e} abs={self.max_abs_error:.3e}"


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar-valued function of x.

    f must be deterministic (freeze any mask sampling before calling).
    x.data is perturbed in place and restored.
    """
    if h <= 0:
        raise ContractError("finite_diff_grad: h must be positive")
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def compare_grads(name: str, analytic: np.ndarray, numeric: np.ndarray, tol: float) -> GradCheckReport:
    """Relative error normalized by the largest gradient magnitude of the
    parameter, so near-zero entries do not produce spurious blowups."""
    abs_err = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    denom = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), 1e-30)
    rel = abs_err / denom
    return GradCheckReport(name, rel, abs_err, rel <= tol)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = DEFAULT_FD_STEP,
    tol: float = 1e-6,
) -> list[GradCheckReport]:
    """Compare autodiff gradients of loss_fn against central differences
    for every parameter. loss_fn must be deterministic between calls."""
    zero_grads(params.values())
    loss = loss_fn()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    reports = []
    for name, p in params.items():
        numeric = finite_diff_grad(lambda _t: loss_fn(), p, h=h)
        reports.append(compare_grads(name, analytic[name], numeric, tol))
    zero_grads(params.values())
    return reports
