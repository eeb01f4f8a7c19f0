"""Brute-force gradient checks: central finite differences on the per-pixel cross entropy."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from pgnseg.gradnorm import (
    LAST,
    PENULT,
    Mode,
    auxiliary_label,
    grad_factors,
    materialize_gradient,
    mode_name,
    pnorm_factored,
)
from pgnseg.toynet import ForwardTrace, SegHeadParams, forward

PROB_FLOOR = 1e-12
MAX_CHECK_SIZE = 10**6
KINK_FACTOR = 10.0
REL_FLOOR = 1e-8


class OracleSizeError(ValueError):
    pass


class ClampWarning(RuntimeWarning):
    pass


@dataclass
class OracleReport:
    max_rel_err: float
    max_abs_err: float
    worst_pixel: tuple[int, int]
    worst_weight_index: int
    passed: bool
    tolerance: float
    checked: list

    def to_json(self) -> str:
        d = asdict(self)
        d["worst_pixel"] = list(self.worst_pixel)
        return json.dumps(d, indent=2, sort_keys=True)


def _loss_map(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    clamped = np.maximum(probs, PROB_FLOOR)
    if np.any((probs < PROB_FLOOR) & (y > 0)):
        warnings.warn("probability below 1e-12 at a labeled class was clamped", ClampWarning, stacklevel=3)
    return -np.sum(y * np.log(clamped), axis=0)


def pixel_loss(trace: ForwardTrace, mode: Mode, pixel: tuple[int, int]) -> float:
    """Cross entropy ``-sum_k y_k log p_k`` at one pixel, labels taken from ``mode``."""
    a, b = pixel
    y = auxiliary_label(trace, mode)
    return float(_loss_map(trace.probs[:, a : a + 1, b : b + 1], y[:, a : a + 1, b : b + 1])[0, 0])


def central_difference(f: Callable[[np.ndarray], np.ndarray], w: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central differences of ``f`` for every entry of ``w``.

    ``f`` may return an array; the result has shape ``w.shape + f(w).shape``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    w = np.array(w, dtype=np.float64)
    flat = w.reshape(-1)
    out = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = np.asarray(f(w), dtype=np.float64)
        flat[i] = orig - eps
        down = np.asarray(f(w), dtype=np.float64)
        flat[i] = orig
        out.append((up - down) / (2 * eps))
    out = np.stack(out)
    return out.reshape(w.shape + out.shape[1:])


def _weight_name(layer: str) -> str:
    if layer == LAST:
        return "k_last"
    if layer == PENULT:
        return "k_penult"
    raise ValueError(f"unknown layer {layer!r}")


def fd_gradient_map(
    params: SegHeadParams,
    psi_prev: np.ndarray,
    mode: Mode,
    layer: str,
    eps: float = 1e-3,
    forward_fn: Callable = forward,
) -> np.ndarray:
    """Finite-difference gradient of every pixel's loss, shape (n_weights, H, W).

    The auxiliary label is fixed from the unperturbed forward pass.  Weight
    order is the C-order flattening of the layer's filter bank.
    """
    y = auxiliary_label(forward_fn(params, psi_prev), mode)
    name = _weight_name(layer)

    def losses(w):
        return _loss_map(forward_fn(params.replace(**{name: w}), psi_prev).probs, y)

    g = central_difference(losses, getattr(params, name), eps)
    return g.reshape(-1, *g.shape[-2:])


def fd_gradient(params, psi_prev, mode: Mode, layer: str, pixel, eps: float = 1e-3, forward_fn=forward):
    """Finite-difference gradient of one pixel's loss, flat over the layer's filter weights."""
    a, b = pixel
    return fd_gradient_map(params, psi_prev, mode, layer, eps, forward_fn)[:, a, b]


def kink_mask(trace: ForwardTrace, eps: float) -> np.ndarray:
    """Pixels where some ReLU pre-activation lies within 10*eps of zero."""
    return np.any(np.abs(trace.pre_relu) < KINK_FACTOR * eps, axis=0)


def check_closed_form(
    params: SegHeadParams,
    psi_prev: np.ndarray,
    modes: Iterable[Mode] = ("oh", "uni"),
    layers: Iterable[str] = (LAST, PENULT),
    ps: Iterable[float] = (0.3, 1.0, 2.0),
    tolerance: float = 1e-4,
    eps: float = 1e-3,
    exact: bool = False,
) -> OracleReport:
    """Compare closed-form gradients and factored scores with finite differences.

    Per pixel, the gradient error is ``max|g_cf - g_fd| / max(max|g_fd|, 1e-8)``
    and the score error is ``|score - ||g_fd||_p| / max(||g_fd||_p, 1e-8)``.
    Penultimate-layer pixels near a ReLU kink are skipped.
    """
    modes, layers, ps = list(modes), list(layers), list(ps)
    h, w = psi_prev.shape[1:]
    for layer in layers:
        n_w = getattr(params, _weight_name(layer)).size
        if h * w * n_w > MAX_CHECK_SIZE:
            raise OracleSizeError(f"{layer}: H*W*weights = {h * w * n_w} exceeds {MAX_CHECK_SIZE}")
    trace = forward(params, psi_prev)
    worst = (0.0, (0, 0), 0)
    max_abs = 0.0
    checked = []
    for mode in modes:
        for layer in layers:
            s, psi = grad_factors(trace, params, mode, layer, exact)
            g_cf = materialize_gradient(s, psi).reshape(-1, h, w)
            g_fd = fd_gradient_map(params, psi_prev, mode, layer, eps)
            valid = ~kink_mask(trace, eps) if layer == PENULT else np.ones((h, w), bool)
            diff = np.abs(g_cf - g_fd)
            denom = np.maximum(np.abs(g_fd).max(axis=0), REL_FLOOR)
            rel = np.where(valid, diff.max(axis=0) / denom, 0.0)
            errs = [rel]
            for p in ps:
                score = pnorm_factored(s, psi, p)
                ref = np.sum(np.abs(g_fd) ** p, axis=0) ** (1.0 / p)
                errs.append(np.where(valid, np.abs(score - ref) / np.maximum(ref, REL_FLOOR), 0.0))
            err = np.max(errs, axis=0)
            a, b = np.unravel_index(np.argmax(err), err.shape)
            checked.append(
                {
                    "mode": mode_name(mode),
                    "layer": layer,
                    "max_rel_err": float(err.max()),
                    "pixels_checked": int(valid.sum()),
                }
            )
            max_abs = max(max_abs, float(np.where(valid[None], diff, 0.0).max()))
            if err[a, b] >= worst[0]:
                worst = (float(err[a, b]), (int(a), int(b)), int(np.argmax(diff[:, a, b])))
    max_rel, pixel, widx = worst
    return OracleReport(max_rel, max_abs, pixel, widx, bool(max_rel <= tolerance), tolerance, checked)
