"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .tensor import DiffArray


def finite_diff_check(scalar_function: Callable[[], DiffArray], params: dict | list, h: float = 1e-5,
                      coords_per_param: int = 8, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``scalar_function`` rebuilds the graph from the current parameter values
    on every call (so it must be deterministic, e.g. reseed any dropout RNG).
    Up to ``coords_per_param`` coordinates are sampled from each parameter.
    The rounding uncertainty of the difference quotient (``eps * |f| / h``) is
    subtracted from each discrepancy, so exactly-zero gradients (e.g. an
    attention key bias) do not register float noise as error.
    """
    items = list(params.values()) if isinstance(params, dict) else list(params)
    for p in items:
        p.zero_grad()
    loss = scalar_function()
    _check_finite(loss)
    loss.backward()
    analytic = {id(p): (np.zeros_like(p.values) if p.grad is None else p.grad.copy()) for p in items}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in items:
        flat = p.values.reshape(-1)
        count = min(coords_per_param, flat.size)
        for i in rng.choice(flat.size, size=count, replace=False):
            original = flat[i]
            flat[i] = original + h
            up = _check_finite(scalar_function())
            flat[i] = original - h
            down = _check_finite(scalar_function())
            flat[i] = original
            numeric = (up - down) / (2.0 * h)
            # rounding in the two function values bounds how well `numeric` is known
            noise = np.finfo(p.values.dtype).eps * max(abs(up), abs(down)) / h
            a = analytic[id(p)].reshape(-1)[i]
            err = max(abs(a - numeric) - noise, 0.0) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    for p in items:
        p.zero_grad()
    return worst


def _check_finite(value: DiffArray) -> float:
    v = float(np.asarray(value.values).reshape(-1)[0])
    if not math.isfinite(v):
        raise ValueError(f"function value is not finite: {v}")
    return v
