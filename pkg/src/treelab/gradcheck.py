"""Finite-difference verification of analytic gradients.

The numeric side never touches the backward rules it checks: it re-runs
the forward pass with each scalar nudged by +-h and takes the central
difference. Forward evaluations for the difference quotient run in
float64 so the quotient is not drowned by FP32 rounding; the analytic
gradients under test are the engine's own FP32 values.

Per-element relative error uses max(|analytic|, |numeric|, floor) as the
denominator, so near-zero gradients are judged on absolute terms.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T

DEFAULT_H = 1e-3
DEFAULT_TOL = 1e-3
DENOM_FLOOR = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   floor: float = DENOM_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def analytic_gradients(loss_fn, params):
    """Run the engine's forward + backward once and collect .grad copies."""
    T.zero_grads(params)
    loss = loss_fn()
    T.backward(loss)
    grads = []
    for p in params:
        grads.append(np.zeros_like(p.data) if p.grad is None else p.grad.copy())
    T.zero_grads(params)
    return grads


def numeric_gradients(loss_fn, params, h: float = DEFAULT_H):
    """Central differences of loss_fn with respect to every param element.

    Temporarily swaps each param's buffer to float64 so the two forward
    evaluations differ by real signal rather than FP32 rounding.
    """
    originals = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        grads = []
        with T.no_grad():
            for p in params:
                g = np.zeros(p.data.shape, dtype=np.float64)
                flat = p.data.reshape(-1)
                gflat = g.reshape(-1)
                for i in range(flat.size):
                    v = flat[i]
                    flat[i] = v + h
                    fp = float(loss_fn().data)
                    flat[i] = v - h
                    fm = float(loss_fn().data)
                    flat[i] = v
                    gflat[i] = (fp - fm) / (2.0 * h)
                grads.append(g)
    finally:
        for p, d in zip(params, originals):
            p.data = d
    return grads


def max_relative_error(loss_fn, params, h: float = DEFAULT_H,
                       floor: float = DENOM_FLOOR) -> float:
    """Worst per-element relative error between analytic and numeric grads."""
    analytic = analytic_gradients(loss_fn, params)
    numeric = numeric_gradients(loss_fn, params, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            worst = max(worst, float(relative_error(a, n, floor).max()))
    return worst


def run_full_suite():
    """Gradient-check every primitive and every full model at tiny shapes.

    Returns a list of (name, max_rel_err, tolerance, passed) rows. Kept as
    a function so the CLI and the test suite share one definition.
    """
    from . import suites

    return suites.gradient_suite()
