"""Analytic-vs-finite-difference gradient verification.

The checker rebuilds the loss via a user callback, so any pipeline that can
express its loss as `loss_fn() -> scalar Node` over a fixed set of parameter
nodes can be verified. Checking demands float64 parameters; central
differences at epsilon ~1e-5 are meaningless in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .errors import InvalidInputError


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float
    per_parameter: dict = field(default_factory=dict)

    def worst(self):
        if not self.per_parameter:
            return None
        return max(self.per_parameter, key=self.per_parameter.get)

    def failures(self):
        return sorted(
            (name for name, err in self.per_parameter.items() if err >= self.tolerance),
            key=lambda n: -self.per_parameter[n],
        )


def numeric_gradient(eval_loss, array: np.ndarray, epsilon: float) -> np.ndarray:
    """Central finite differences of `eval_loss()` w.r.t. every entry of `array`.

    `array` is perturbed in place and restored; `eval_loss` must re-read it.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        up = eval_loss()
        flat[i] = orig - epsilon
        down = eval_loss()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * epsilon)
    return grad


def gradient_check(loss_fn, params: dict, epsilon: float = 1e-5, tolerance: float = 1e-4,
                   denominator_floor: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of `loss_fn` against central differences.

    Relative error per entry is |a - n| / max(|a|, |n|, denominator_floor),
    so near-zero gradients are compared on an absolute scale.
    """
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    for name, p in params.items():
        if p.value.dtype != np.float64:
            raise InvalidInputError(f"gradient check requires float64 parameters ({name} is {p.value.dtype})")

    autodiff.zero_grads(params.values())
    loss = loss_fn()
    autodiff.backward(loss)
    analytic = {name: (np.zeros_like(p.value) if p.grad is None else np.array(p.grad))
                for name, p in params.items()}
    autodiff.zero_grads(params.values())

    def eval_loss():
        with autodiff.no_grad():
            return float(loss_fn().value)

    report = GradCheckReport(0.0, True, tolerance)
    for name, p in params.items():
        numeric = numeric_gradient(eval_loss, p.value, epsilon)
        a, n = analytic[name], numeric
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), denominator_floor)
        rel = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
        report.per_parameter[name] = rel
        report.max_rel_error = max(report.max_rel_error, rel)
    report.passed = report.max_rel_error < tolerance
    return report
