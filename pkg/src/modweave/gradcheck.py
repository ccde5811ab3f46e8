"""Finite-difference gradient oracle and the model-wide check harness.

`finite_diff_grad` is the independent oracle: central differences of an
arbitrary scalar function, no autodiff involved. `check_gradients` runs
a loss once through backward and compares every (optionally subsampled)
coordinate of every named parameter against that oracle. Meant to run
under float64 (set_default_dtype) where central differences are trustworthy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


def finite_diff_grad(fn, params, h: float = 1e-5):
    """Central differences (fn(p+h.e_i) - fn(p-h.e_i)) / 2h per coordinate.

    fn: zero-argument callable returning a float, re-evaluated from the
    current parameter data. params: Tensors perturbed in place.
    Returns one float64 array per parameter, matching its shape.
    """
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(fn())
            flat[i] = orig - h
            lo = float(fn())
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * h)
        grads.append(g.reshape(p.data.shape))
    return grads


def finite_diff_coords(fn, param: Tensor, coords, h: float = 1e-5):
    """Central differences restricted to the given flat coordinates."""
    flat = param.data.reshape(-1)
    out = np.zeros(len(coords), dtype=np.float64)
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(fn())
        flat[i] = orig - h
        lo = float(fn())
        flat[i] = orig
        out[k] = (hi - lo) / (2.0 * h)
    return out


def relative_error(a: float, b: float, atol: float = 1e-6) -> float:
    m = max(abs(a), abs(b))
    if m < atol:
        return 0.0
    return abs(a - b) / m


@dataclass
class GroupReport:
    name: str
    size: int
    checked: int
    max_rel_err: float


def check_gradients(loss_fn, named_params, h: float = 1e-6,
                    max_coords: int | None = 48, seed: int = 0):
    """Compare backward() gradients of loss_fn against central differences.

    loss_fn: zero-argument callable returning the scalar loss Tensor,
    rebuilt from current parameter data on every call. Every named group
    is checked; groups larger than max_coords are subsampled
    deterministically. Returns one GroupReport per group.
    """
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {}
    for name, p in named_params:
        if p.grad is None:
            raise ValueError(f"parameter {name!r} got no gradient from loss_fn")
        analytic[name] = p.grad.reshape(-1).copy()
        p.grad = None

    def value():
        return loss_fn().item()

    rng = np.random.default_rng(seed)
    reports = []
    for name, p in named_params:
        size = p.data.size
        if max_coords is None or size <= max_coords:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        numeric = finite_diff_coords(value, p, coords, h=h)
        worst = 0.0
        for k, i in enumerate(coords):
            err = relative_error(float(analytic[name][i]), float(numeric[k]))
            if err > worst:
                worst = err
        reports.append(GroupReport(name, size, len(coords), worst))
    return reports
