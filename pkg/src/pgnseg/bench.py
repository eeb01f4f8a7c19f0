"""Wall-clock comparison of the forward pass against forward + PGN scoring."""

from __future__ import annotations

import statistics
import time

import numpy as np

from pgnseg.gradnorm import LAST, grad_factors, materialized_pnorm, pnorm_factored
from pgnseg.toynet import forward


def _summary(times: list[float]) -> dict:
    return {
        "median_s": statistics.median(times),
        "mean_s": statistics.fmean(times),
        "std_s": statistics.pstdev(times),
        "min_s": min(times),
        "max_s": max(times),
    }


def bench_overhead(params, psi_prev, modes=("oh", "uni"), layer=LAST, p=2.0, repeats=20, warmup=3) -> dict:
    """Time forward alone and forward followed by PGN scores for each mode.

    Both timings come from the same repetition (forward, then scoring), so the
    total is never below the forward time and the median ratio is >= 1.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    fwd, total = [], []
    for i in range(warmup + repeats):
        t0 = time.perf_counter()
        trace = forward(params, psi_prev)
        t1 = time.perf_counter()
        for mode in modes:
            s, psi = grad_factors(trace, params, mode, layer)
            pnorm_factored(s, psi, p)
        t2 = time.perf_counter()
        if i >= warmup:
            fwd.append(t1 - t0)
            total.append(t2 - t0)
    f, t = _summary(fwd), _summary(total)
    return {
        "forward": f,
        "forward_plus_pgn": t,
        "overhead_ratio": t["median_s"] / f["median_s"],
        "pgn_fraction_of_forward": (t["median_s"] - f["median_s"]) / f["median_s"],
        "config": {"modes": list(modes), "layer": layer, "p": p, "repeats": repeats, "warmup": warmup,
                   "shape": list(psi_prev.shape)},
    }


def bench_factored_vs_materialized(s: np.ndarray, psi: np.ndarray, p: float = 2.0, repeats: int = 5) -> dict:
    """Median time of the factored p-norm and of the explicit outer-product p-norm."""
    fac, mat = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        a = pnorm_factored(s, psi, p)
        t1 = time.perf_counter()
        b = materialized_pnorm(s, psi, p)
        t2 = time.perf_counter()
        fac.append(t1 - t0)
        mat.append(t2 - t1)
    rel = float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))
    return {
        "factored_s": statistics.median(fac),
        "materialized_s": statistics.median(mat),
        "speedup": statistics.median(mat) / statistics.median(fac),
        "max_rel_diff": rel,
    }
