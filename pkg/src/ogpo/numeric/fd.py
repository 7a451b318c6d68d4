"""Central finite differences, the oracle every analytic gradient is checked against."""

from __future__ import annotations

from typing import Callable

import numpy as np


def finite_diff_grad(f: Callable[[dict], float], params: dict[str, np.ndarray], eps: float = 1e-5):
    """``(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)`` for every coordinate.

    ``f`` is called on perturbed copies; ``params`` is never mutated.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out = {}
    for k, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = float(f(work))
            flat[i] = old - eps
            fm = float(f(work))
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective while differencing {k}[{i}]")
            gflat[i] = (fp - fm) / (2 * eps)
        out[k] = g
    return out


def rel_err(a: dict[str, np.ndarray], b: dict[str, np.ndarray], floor: float = 1e-8) -> float:
    """Max over parameters of ``|a-b| / max(|a|, |b|, floor)`` computed on the full vector."""
    worst = 0.0
    for k in a:
        x, y = np.ravel(a[k]), np.ravel(b[k])
        denom = max(np.linalg.norm(x), np.linalg.norm(y), floor)
        worst = max(worst, float(np.linalg.norm(x - y) / denom))
    return worst
