"""Two-layer reference segmentation head: conv3x3 -> BN -> ReLU -> conv1x1 -> softmax."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from pgnseg.tensor import DimensionError, conv2d, read_npy, write_npy

PARAM_FILES = (
    "k_penult",
    "b_penult",
    "bn_gamma",
    "bn_beta",
    "bn_mean",
    "bn_var",
    "k_last",
    "b_last",
)
MANIFEST = "manifest.json"
DEFAULT_DIMS = {"c_prev": 4, "c_feat": 6, "num_classes": 5, "height": 8, "width": 8}
DEFAULT_BN_EPS = 1e-5


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SegHeadParams:
    k_penult: np.ndarray  # c_feat x c_prev x 3 x 3
    b_penult: np.ndarray  # c_feat
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    k_last: np.ndarray  # num_classes x c_feat x 1 x 1
    b_last: np.ndarray  # num_classes
    bn_eps: float

    def __post_init__(self):
        c_feat, c_prev, kh, kw = self.k_penult.shape
        if (kh, kw) != (3, 3):
            raise DimensionError(f"k_penult must be 3x3, got {kh}x{kw}")
        if self.k_last.ndim != 4 or self.k_last.shape[2:] != (1, 1):
            raise DimensionError(f"k_last must be C x c_feat x 1 x 1, got {self.k_last.shape}")
        if self.k_last.shape[1] != c_feat:
            raise DimensionError("k_last input channels do not match k_penult output channels")
        for name in ("b_penult", "bn_gamma", "bn_beta", "bn_mean", "bn_var"):
            if getattr(self, name).shape != (c_feat,):
                raise DimensionError(f"{name} must have shape ({c_feat},)")
        if self.b_last.shape != (self.num_classes,):
            raise DimensionError(f"b_last must have shape ({self.num_classes},)")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if not np.all(self.bn_var > 0) or not self.bn_eps > 0:
            raise ValueError("bn_var and bn_eps must be strictly positive")

    @property
    def num_classes(self) -> int:
        return self.k_last.shape[0]

    @property
    def c_feat(self) -> int:
        return self.k_penult.shape[0]

    @property
    def c_prev(self) -> int:
        return self.k_penult.shape[1]

    @property
    def bn_scale(self) -> np.ndarray:
        """Channel-wise slope of the inference-mode batch norm."""
        return self.bn_gamma / np.sqrt(self.bn_var + self.bn_eps)

    def replace(self, **changes) -> "SegHeadParams":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return SegHeadParams(**values)


@dataclass(frozen=True)
class ForwardTrace:
    psi_prev: np.ndarray
    pre_bn: np.ndarray
    pre_relu: np.ndarray
    psi: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    pred: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.probs.shape[1:]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the leading (class) axis with max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("softmax input contains NaN or Inf")
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def forward(params: SegHeadParams, psi_prev: np.ndarray) -> ForwardTrace:
    psi_prev = np.asarray(psi_prev, dtype=np.float64)
    if psi_prev.ndim != 3 or psi_prev.shape[0] != params.c_prev:
        raise DimensionError(
            f"psi_prev must be {params.c_prev} x H x W, got shape {psi_prev.shape}"
        )
    pre_bn = conv2d(psi_prev, params.k_penult, params.b_penult, 1)
    pre_relu = (pre_bn - params.bn_mean[:, None, None]) * params.bn_scale[:, None, None] + params.bn_beta[
        :, None, None
    ]
    psi = np.maximum(pre_relu, 0.0)
    logits = conv2d(psi, params.k_last, params.b_last, 0)
    probs = softmax(logits)
    pred = np.argmax(probs, axis=0)
    return ForwardTrace(psi_prev, pre_bn, pre_relu, psi, logits, probs, pred)


# SplitMix64 constants
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs ``start .. start+count-1`` of the SplitMix64 sequence seeded with ``seed``.

    Output i is ``mix(seed + (i + 1) * 0x9E3779B97F4A7C15)`` with the standard
    SplitMix64 finalizer, all arithmetic modulo 2**64.
    """
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed % 2**64) + idx * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    return z


class UniformStream:
    """Sequential floats in [-1, 1) drawn from one SplitMix64 sequence.

    Each output uses its top 53 bits: ``(z >> 11) * 2**-53 * 2 - 1``.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self.pos = 0

    def draw(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        z = splitmix64(self.seed, self.pos, n)
        self.pos += n
        u = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (2.0 * u - 1.0).reshape(shape)


def gen_synthetic(seed: int, dims: dict | None = None, bn_eps: float = DEFAULT_BN_EPS):
    """Deterministic random head parameters and input features.

    Draw order from a single stream: k_penult, b_penult, bn_gamma, bn_beta,
    bn_mean, bn_var, k_last, b_last, psi_prev.  Weights are scaled by
    1/sqrt(fan_in); bn_gamma lies in [0.5, 1.5), bn_var in [0.5, 1.5),
    psi_prev in [-1, 1).
    """
    d = dict(DEFAULT_DIMS)
    if dims:
        d.update(dims)
    c_prev, c_feat, n_cls, h, w = (d[k] for k in ("c_prev", "c_feat", "num_classes", "height", "width"))
    if min(c_prev, c_feat, h, w) < 1:
        raise ValueError(f"all dims must be >= 1, got {d}")
    if n_cls < 2:
        raise ValueError(f"num_classes must be >= 2, got {n_cls}")
    rng = UniformStream(seed)
    params = SegHeadParams(
        k_penult=rng.draw((c_feat, c_prev, 3, 3)) / np.sqrt(9 * c_prev),
        b_penult=0.1 * rng.draw((c_feat,)),
        bn_gamma=1.0 + 0.5 * rng.draw((c_feat,)),
        bn_beta=0.1 * rng.draw((c_feat,)),
        bn_mean=0.1 * rng.draw((c_feat,)),
        bn_var=1.0 + 0.5 * rng.draw((c_feat,)),
        k_last=2.0 * rng.draw((n_cls, c_feat, 1, 1)) / np.sqrt(c_feat),
        b_last=0.1 * rng.draw((n_cls,)),
        bn_eps=bn_eps,
    )
    psi_prev = rng.draw((c_prev, h, w))
    return params, psi_prev


def save_bundle(out_dir, params: SegHeadParams, psi_prev: np.ndarray, meta: dict | None = None) -> list[str]:
    """Write params and input as NPY files plus a JSON manifest; returns written file names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {name: getattr(params, name) for name in PARAM_FILES}
    tensors["psi_prev"] = psi_prev
    written = []
    for name, arr in tensors.items():
        fname = f"{name}.npy"
        write_npy(np.asarray(arr, dtype=np.float64), out / fname)
        written.append(fname)
    manifest = {
        "dims": {
            "c_prev": params.c_prev,
            "c_feat": params.c_feat,
            "num_classes": params.num_classes,
            "height": int(psi_prev.shape[1]),
            "width": int(psi_prev.shape[2]),
        },
        "bn_eps": params.bn_eps,
        "tensors": {name: {"file": f"{name}.npy", "shape": list(np.shape(arr))} for name, arr in tensors.items()},
    }
    if meta:
        manifest.update(meta)
    with open(out / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return written


def load_bundle(in_dir: str | os.PathLike):
    """Read a bundle written by :func:`save_bundle`; shapes are checked against the manifest."""
    src = Path(in_dir)
    mpath = src / MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"missing manifest {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    arrays = {}
    for name in PARAM_FILES + ("psi_prev",):
        entry = manifest.get("tensors", {}).get(name)
        if entry is None:
            raise KeyError(f"manifest does not list tensor {name!r}")
        path = src / entry["file"]
        if not path.is_file():
            raise FileNotFoundError(f"missing tensor file {path}")
        arr = read_npy(path).astype(np.float64)
        if list(arr.shape) != list(entry["shape"]):
            raise DimensionError(f"{path.name}: shape {arr.shape} does not match manifest {entry['shape']}")
        arrays[name] = arr
    psi_prev = arrays.pop("psi_prev")
    params = SegHeadParams(bn_eps=float(manifest["bn_eps"]), **arrays)
    return params, psi_prev, manifest
