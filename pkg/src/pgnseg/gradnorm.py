"""Closed-form per-pixel loss gradients of the segmentation head and their p-norms.

Every per-pixel gradient handled here is an outer product ``S[:, a, b] (x) Psi[:, a, b]``
of an output-side factor ``S`` and an input-side factor ``Psi``; scores are the
product of the two factor norms, so the gradient tensor itself is never built
outside of tests and benchmarks.

Label modes are ``"oh"`` (predicted one-hot), ``"uni"`` (uniform 1/C) or an
explicit C x H x W array of per-pixel label distributions.

The output-side weights follow the PGN formula ``softmax_k * (1 - y_k)``.
Passing ``exact=True`` uses ``softmax_k - y_k`` instead, which is the true
derivative of the cross entropy with respect to the logits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from pgnseg.tensor import DimensionError, unfold, write_npy
from pgnseg.toynet import ForwardTrace, SegHeadParams

LAST = "last"
PENULT = "penult"
LAYERS = (LAST, PENULT)
MODES = ("oh", "uni", "explicit")

Mode = Union[str, np.ndarray]


class LabelValidationError(ValueError):
    pass


@dataclass(frozen=True)
class GradientScoreMap:
    scores: np.ndarray  # H x W, nonnegative
    mode: str
    layer: str
    p: float

    @property
    def name(self) -> str:
        return f"pgn_{self.mode}_{self.layer}_p{self.p:g}"

    def metadata(self) -> dict:
        return {"mode": self.mode, "layer": self.layer, "p": self.p, "shape": list(self.scores.shape)}


def mode_name(mode: Mode) -> str:
    if isinstance(mode, str):
        if mode not in ("oh", "uni"):
            raise LabelValidationError(f"unknown label mode {mode!r}")
        return mode
    return "explicit"


def auxiliary_label(trace: ForwardTrace, mode: Mode) -> np.ndarray:
    """Per-pixel label distribution (C x H x W) for a label mode."""
    c = trace.num_classes
    if isinstance(mode, str):
        if mode == "oh":
            return (np.arange(c)[:, None, None] == trace.pred[None]).astype(np.float64)
        if mode == "uni":
            return np.full(trace.probs.shape, 1.0 / c)
        raise LabelValidationError(f"unknown label mode {mode!r}")
    y = np.asarray(mode, dtype=np.float64)
    if y.shape != trace.probs.shape:
        raise LabelValidationError(f"explicit labels have shape {y.shape}, expected {trace.probs.shape}")
    if np.any(y < 0) or not np.allclose(y.sum(axis=0), 1.0, rtol=0, atol=1e-6):
        raise LabelValidationError("explicit labels must be nonnegative and sum to 1 at every pixel")
    return y


def output_weights(trace: ForwardTrace, mode: Mode, exact: bool = False) -> np.ndarray:
    """Sensitivity of the pixel loss to each logit, C x H x W."""
    y = auxiliary_label(trace, mode)
    if exact:
        return trace.probs - y
    return trace.probs * (1.0 - y)


def last_layer_grad_factors(trace: ForwardTrace, mode: Mode, exact: bool = False):
    """Factors of dL_ab/dK_last[h, e] = S[h, a, b] * Psi[e, a, b]."""
    return output_weights(trace, mode, exact), trace.psi


def penult_layer_grad_factors(trace: ForwardTrace, params: SegHeadParams, mode: Mode, exact: bool = False):
    """Factors of dL_ab/dK_penult[f, e, g, h] = S[f, a, b] * Psi[e*9 + g*3 + h, a, b]."""
    if trace.pre_relu is None or trace.psi_prev is None:
        raise ValueError("trace lacks pre_relu/psi_prev needed for penultimate gradients")
    w = output_weights(trace, mode, exact)
    k_last = params.k_last[:, :, 0, 0]
    if k_last.shape[1] != trace.pre_relu.shape[0]:
        raise DimensionError("k_last does not match the trace's feature channels")
    back = np.tensordot(k_last, w, axes=(0, 0))  # c_feat x H x W
    gate = trace.pre_relu > 0
    s = back * gate * params.bn_scale[:, None, None]
    return s, unfold(trace.psi_prev, 3, 1)


def grad_factors(trace, params, mode: Mode, layer: str, exact: bool = False):
    if layer == LAST:
        return last_layer_grad_factors(trace, mode, exact)
    if layer == PENULT:
        return penult_layer_grad_factors(trace, params, mode, exact)
    raise ValueError(f"unknown layer {layer!r}")


def _factor_norm(x: np.ndarray, p: float) -> np.ndarray:
    a = np.abs(x)
    if p == 1:
        return a.sum(axis=0)
    if p == 2:
        return np.sqrt(np.einsum("i...,i...->...", a, a))
    if p == 0.5:
        return np.sum(np.sqrt(a), axis=0) ** 2
    return np.sum(a**p, axis=0) ** (1.0 / p)


def pnorm_factored(s: np.ndarray, psi: np.ndarray, p: float) -> np.ndarray:
    """Per-pixel p-norm of the outer product of two channel vectors.

    For 0 < p < 1 this is the p-seminorm ``(sum |x|^p)^(1/p)``.
    """
    if not p > 0:
        raise ValueError(f"p must be positive, got {p}")
    if s.shape[1:] != psi.shape[1:]:
        raise DimensionError(f"spatial shapes differ: {s.shape[1:]} vs {psi.shape[1:]}")
    return _factor_norm(s, p) * _factor_norm(psi, p)


def materialize_gradient(s: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Full per-pixel gradient tensor, A x B x H x W.  Test and benchmark use only."""
    return s[:, None] * psi[None, :]


def materialized_pnorm(s: np.ndarray, psi: np.ndarray, p: float, rows_per_chunk: int = 16) -> np.ndarray:
    """Reference p-norm that builds the gradient tensor explicitly, a block of rows at a time."""
    if not p > 0:
        raise ValueError(f"p must be positive, got {p}")
    h = s.shape[1]
    out = np.empty(s.shape[1:])
    for r0 in range(0, h, rows_per_chunk):
        g = np.abs(materialize_gradient(s[:, r0 : r0 + rows_per_chunk], psi[:, r0 : r0 + rows_per_chunk]))
        out[r0 : r0 + rows_per_chunk] = np.sum(g**p, axis=(0, 1)) ** (1.0 / p)
    return out


def pgn_heatmap(
    trace: ForwardTrace,
    params: SegHeadParams,
    mode: Mode,
    layer: str = LAST,
    p: float = 2.0,
    exact: bool = False,
) -> GradientScoreMap:
    s, psi = grad_factors(trace, params, mode, layer, exact)
    return GradientScoreMap(pnorm_factored(s, psi, p), mode_name(mode), layer, float(p))


def baseline_maps(trace: ForwardTrace) -> dict[str, np.ndarray]:
    """Softmax uncertainty baselines: 1 - max probability and normalized entropy."""
    probs = trace.probs
    c = probs.shape[0]
    plogp = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    entropy = np.clip(-plogp.sum(axis=0) / np.log(c), 0.0, 1.0)
    return {"max_softmax": 1.0 - probs.max(axis=0), "entropy": entropy}


def write_heatmap(heatmap: GradientScoreMap, out_dir, stem: str | None = None) -> list[Path]:
    """Write ``<stem>.npy`` (float32 H x W) and ``<stem>.json`` with mode/layer/p."""
    out = Path(out_dir)
    stem = stem or heatmap.name
    npy = out / f"{stem}.npy"
    side = out / f"{stem}.json"
    write_npy(heatmap.scores.astype(np.float32), npy)
    with open(side, "w") as fh:
        json.dump(heatmap.metadata(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [npy, side]


def write_pgm(scores: np.ndarray, path) -> None:
    """8-bit binary PGM scaled so the maximum maps to 255."""
    scores = np.asarray(scores, dtype=np.float64)
    top = scores.max()
    img = np.zeros(scores.shape, np.uint8) if top <= 0 else np.round(255.0 * scores / top).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
