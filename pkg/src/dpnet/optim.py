"""Parameter update rules and the finite-difference gradient check."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import DTYPE


def _check_shapes(params: dict, grads: dict):
    for name, p in params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for {name!r}")
        if np.shape(grads[name]) != p.shape:
            raise ValueError(f"gradient shape {np.shape(grads[name])} != parameter shape "
                             f"{p.shape} for {name!r}")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    _check_shapes(params, grads)
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def step_schedule(base_lr: float, milestones: Sequence[int] = (), factor: float = 0.1):
    """Learning rate as a function of the iteration; milestones are inclusive."""
    milestones = sorted(milestones)

    def lr_at(iteration: int) -> float:
        passed = sum(1 for m in milestones if iteration >= m)
        return base_lr * factor ** passed

    return lr_at


def sgd_step(params: dict, grads: dict, lr, iteration: int = 0) -> dict:
    """Plain SGD in place; ``lr`` is a float or a schedule ``iteration -> lr``."""
    _check_shapes(params, grads)
    rate = lr(iteration) if callable(lr) else lr
    for name, p in params.items():
        p -= rate * grads[name]
    return params


# ---------------------------------------------------------------------------
# finite differences

@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    excluded: list
    errors: np.ndarray

    def passed(self, tol: float) -> bool:
        return self.checked > 0 and self.max_rel_error <= tol


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def finite_diff_check(f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray,
                      h: float | Sequence[float] = (1e-4, 3e-4, 1e-3),
                      kink_tol: float = 1e-4, coords=None) -> GradCheckResult:
    """Compare ``analytic`` with central differences of ``f`` at ``x``.

    Each coordinate is scored by its best relative error over the step sweep
    ``h``. A coordinate near a kink (a max tie, a ReLU at 0) is excluded: it
    shows up as one-sided slopes that disagree at the smallest step, or as
    central estimates that drift with the step size.
    """
    x = np.array(x, dtype=DTYPE)
    analytic = np.asarray(analytic, dtype=DTYPE)
    if analytic.shape != x.shape:
        raise ValueError(f"analytic gradient shape {analytic.shape} != point shape {x.shape}")
    steps = sorted([h] if np.isscalar(h) else list(h))
    f0 = _finite(f(x))
    flat = x.reshape(-1)
    a_flat = analytic.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    errors, excluded = [], []
    for k in idx:
        orig = flat[k]
        numeric = []
        for i, step in enumerate(steps):
            flat[k] = orig + step
            fp = _finite(f(x))
            flat[k] = orig - step
            fm = _finite(f(x))
            flat[k] = orig
            numeric.append((fp - fm) / (2 * step))
            if i == 0:
                right, left = (fp - f0) / step, (f0 - fm) / step
                one_sided_gap = abs(right - left) / max(1.0, abs(right) + abs(left))
        scale = max(1.0, max(abs(n) for n in numeric))
        if one_sided_gap > 1e-2 or (max(numeric) - min(numeric)) > kink_tol * scale:
            excluded.append(int(k))
            continue
        errors.append(float(relative_error(a_flat[k], numeric).min()))
    errs = np.asarray(errors)
    return GradCheckResult(float(errs.max()) if errs.size else 0.0, len(errors), excluded, errs)


def _finite(v) -> float:
    v = float(v)
    if not np.isfinite(v):
        raise FloatingPointError("objective is not finite at a probe point")
    return v
