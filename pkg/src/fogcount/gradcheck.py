"""Finite-difference validation of analytic gradients.

The checker treats the function under test as a black box: it perturbs one
input coordinate at a time and compares the central difference against the
gradient produced by the tape. It never reuses tape machinery to build the
reference values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    n_checked: int
    failures: list = field(default_factory=list)  # (flat_index, analytic, numeric, rel_err)

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        return (f"grad_check {state}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tol:.1e}, {self.n_checked} coords)")


def central_difference(f, x: np.ndarray, flat_idx: int, step: float) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h evaluated with fresh forward passes."""
    xp = x.copy().reshape(-1)
    xm = x.copy().reshape(-1)
    xp[flat_idx] += step
    xm[flat_idx] -= step
    fp = float(f(Tensor(xp.reshape(x.shape))).data)
    fm = float(f(Tensor(xm.reshape(x.shape))).data)
    return (fp - fm) / (2.0 * step)


def grad_check(f, x: Tensor, step: float = 1e-6, tol: float = 1e-5,
               coords=None) -> GradCheckReport:
    """Compare tape gradients of scalar-valued ``f`` against central differences.

    coords: optional iterable of flat indices to check (default: all).
    A NaN in any forward pass is reported as a failure at that coordinate.
    """
    if not (0.0 < step <= 1e-3):
        raise ValueError(f"grad_check: step must be in (0, 1e-3], got {step}")

    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ValueError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    if np.isnan(out.data).any():
        return GradCheckReport(np.inf, tol, False, 0, failures=[(-1, np.nan, np.nan, np.inf)])
    out.backward()
    analytic = np.zeros_like(x.data) if probe.grad is None else probe.grad
    analytic = analytic.reshape(-1)

    if coords is None:
        coords = range(x.data.size)

    max_rel = 0.0
    failures = []
    n = 0
    for i in coords:
        n += 1
        num = central_difference(f, x.data, i, step)
        if np.isnan(num):
            failures.append((i, float(analytic[i]), num, np.inf))
            max_rel = np.inf
            continue
        denom = max(abs(analytic[i]), abs(num), 1e-8)
        rel = abs(analytic[i] - num) / denom
        if rel > max_rel:
            max_rel = rel
        if rel > tol:
            failures.append((i, float(analytic[i]), num, rel))
    return GradCheckReport(max_rel, tol, max_rel <= tol, n, failures)


def grad_check_param(forward_fn, param: Tensor, step: float = 1e-6, tol: float = 1e-4,
                     coords=None) -> GradCheckReport:
    """Finite-difference check of d forward_fn() / d param for an in-place
    model parameter.

    forward_fn takes no arguments and must rebuild the loss from scratch on
    every call; param.data is perturbed coordinate by coordinate for the
    numeric side, and the tape gradient provides the analytic side.
    """
    if not (0.0 < step <= 1e-3):
        raise ValueError(f"grad_check_param: step must be in (0, 1e-3], got {step}")
    param.grad = None
    out = forward_fn()
    if out.size != 1:
        raise ValueError(f"grad_check_param: loss must be scalar, got shape {out.shape}")
    if np.isnan(out.data).any():
        return GradCheckReport(np.inf, tol, False, 0, failures=[(-1, np.nan, np.nan, np.inf)])
    out.backward()
    analytic = (np.zeros_like(param.data) if param.grad is None else param.grad).reshape(-1)

    flat = param.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    max_rel, failures, n = 0.0, [], 0
    for i in coords:
        n += 1
        orig = flat[i]
        flat[i] = orig + step
        fp = float(forward_fn().data)
        flat[i] = orig - step
        fm = float(forward_fn().data)
        flat[i] = orig
        num = (fp - fm) / (2.0 * step)
        if np.isnan(num):
            failures.append((i, float(analytic[i]), num, np.inf))
            max_rel = np.inf
            continue
        denom = max(abs(analytic[i]), abs(num), 1e-8)
        rel = abs(analytic[i] - num) / denom
        max_rel = max(max_rel, rel)
        if rel > tol:
            failures.append((i, float(analytic[i]), num, rel))
    param.grad = None
    return GradCheckReport(max_rel, tol, max_rel <= tol, n, failures)


def sample_coords(size: int, k: int, rng: np.random.Generator):
    """Deterministic subsample of flat coordinates for large tensors."""
    if size <= k:
        return list(range(size))
    return sorted(rng.choice(size, size=k, replace=False).tolist())
