"""Finite-difference verification of the analytic gradients.

Central differences (f(t+e) - f(t-e)) / 2e are compared per coordinate
against the gradients produced by ``backward()``. Large parameters are
subsampled. Coordinates known to sit on a non-differentiable point (maxpool
ties, relu kinks) can be excluded via ``exclude`` masks.
"""

import numpy as np

from . import graph


def grad_check(loss_fn, params, epsilon=1e-5, max_coords=24, rng=None, exclude=None):
    """Max relative error between analytic and numeric gradients.

    loss_fn: zero-argument callable rebuilding the scalar loss Node from the
        current parameter values.
    params: iterable of Parameter nodes to check.
    exclude: optional {param_name: boolean_mask} of coordinates to skip.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon must be within [1e-7, 1e-3], got {epsilon}")
    params = list(params)
    rng = rng or np.random.default_rng(0)
    exclude = exclude or {}

    graph.zero_grads(params)
    loss_fn().backward()
    analytic = {p.name: (np.zeros_like(p.value) if p.grad is None else p.grad.copy()) for p in params}

    worst = 0.0
    for p in params:
        flat = p.value.ravel()
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        skip = exclude.get(p.name)
        for i in coords:
            if skip is not None and skip.ravel()[i]:
                continue
            orig = flat[i]
            flat[i] = orig + epsilon
            f_hi = float(loss_fn().value)
            flat[i] = orig - epsilon
            f_lo = float(loss_fn().value)
            flat[i] = orig
            numeric = (f_hi - f_lo) / (2.0 * epsilon)
            a = analytic[p.name].ravel()[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
