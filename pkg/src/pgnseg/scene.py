"""Synthetic evaluation scenes for the toy head.

A scene is a smooth in-distribution feature map, a corrupted copy fed to the
head, a semantic ground truth (the head's prediction on the clean features)
and an OoD mask marking a rectangle whose features were replaced by
out-of-range activations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pgnseg.segments import IGNORE_LABEL
from pgnseg.tensor import conv2d
from pgnseg.toynet import DEFAULT_BN_EPS, SegHeadParams, UniformStream, forward, gen_synthetic


@dataclass(frozen=True)
class Scene:
    params: SegHeadParams
    psi_prev: np.ndarray  # what the head sees
    gt: np.ndarray  # H x W class ids, IGNORE_LABEL inside the OoD box
    ood_mask: np.ndarray  # H x W bool


def _smooth(x: np.ndarray, k: int) -> np.ndarray:
    c = x.shape[0]
    box = np.zeros((c, c, k, k))
    box[np.arange(c), np.arange(c)] = 1.0 / (k * k)
    y = conv2d(x, box, np.zeros(c), (k - 1) // 2)
    return y / np.abs(y).max()


def gen_scene(
    seed: int,
    dims: dict | None = None,
    ood_scale: float = 4.0,
    noise: float = 0.3,
    smooth: int = 5,
    bn_eps: float = DEFAULT_BN_EPS,
) -> Scene:
    """Deterministic scene; the OoD box covers a seed-dependent rectangle of ~1/16 of the image.

    The head parameters are those of :func:`gen_synthetic` with the same seed;
    the remaining draws continue a second SplitMix64 stream seeded with
    ``seed + 1_000_003``.
    """
    params, _ = gen_synthetic(seed, dims, bn_eps)
    c_prev = params.c_prev
    d = dims or {}
    h = d.get("height", 64)
    w = d.get("width", 64)
    rng = UniformStream(seed + 1_000_003)
    clean = _smooth(rng.draw((c_prev, h, w)), smooth)
    observed = clean + noise * rng.draw((c_prev, h, w))
    bh, bw = max(h // 4, 1), max(w // 4, 1)
    corner = rng.draw((2,))
    r0 = int((corner[0] + 1) / 2 * (h - bh + 1))
    c0 = int((corner[1] + 1) / 2 * (w - bw + 1))
    ood = np.zeros((h, w), dtype=bool)
    ood[r0 : r0 + bh, c0 : c0 + bw] = True
    observed[:, ood] = ood_scale * rng.draw((c_prev, bh * bw))
    gt = forward(params, clean).pred.astype(np.int64)
    gt[ood] = IGNORE_LABEL
    return Scene(params, observed, gt, ood)
