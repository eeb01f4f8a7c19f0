"""Pixel calibration, sparsification and OoD segmentation metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from pgnseg.metamodel import UndefinedMetricError
from pgnseg.segments import connected_components

DEFAULT_BINS = 10
DEFAULT_THRESHOLDS = tuple(round(0.25 + 0.05 * i, 2) for i in range(11))
SPARSIFICATION_FRACTIONS = tuple(i / 50 for i in range(50))


def normalize_scores(scores, top: float | None = None) -> np.ndarray:
    """Divide by the maximum score (of this array unless ``top`` is given)."""
    scores = np.asarray(scores, dtype=np.float64)
    top = float(scores.max()) if top is None else float(top)
    return scores / top if top > 0 else np.zeros_like(scores)


def confidence_from_uncertainty(scores, top: float | None = None) -> np.ndarray:
    return 1.0 - normalize_scores(scores, top)


def ece(confidences, correct, bins: int = DEFAULT_BINS) -> float:
    """Expected calibration error over equal-width confidence bins on [0, 1]."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    hit = np.asarray(correct, dtype=np.float64).ravel()
    if conf.size == 0:
        raise UndefinedMetricError("ECE of an empty set")
    if conf.shape != hit.shape:
        raise ValueError("confidences and correctness differ in length")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    b = np.minimum((conf * bins).astype(np.int64), bins - 1)
    n_b = np.bincount(b, minlength=bins)
    acc_sum = np.bincount(b, weights=hit, minlength=bins)
    conf_sum = np.bincount(b, weights=conf, minlength=bins)
    nz = n_b > 0
    gaps = np.abs(acc_sum[nz] - conf_sum[nz]) / n_b[nz]
    return float(np.sum(n_b[nz] / conf.size * gaps))


def brier_errors(probs: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel Brier score ``sum_k (p_k - [gt == k])^2``; gt must hold valid class ids."""
    onehot = np.arange(probs.shape[0]).reshape(-1, *([1] * gt.ndim)) == gt[None]
    return np.sum((probs - onehot) ** 2, axis=0)


def sparsification_curve(uncertainty, errors, fractions=SPARSIFICATION_FRACTIONS) -> np.ndarray:
    """Mean error of the pixels kept after removing the most uncertain fraction, normalized at f=0."""
    u = np.asarray(uncertainty, dtype=np.float64).ravel()
    e = np.asarray(errors, dtype=np.float64).ravel()
    if u.shape != e.shape:
        raise ValueError("uncertainty and errors differ in length")
    order = np.argsort(-u, kind="stable")
    # suffix sums of errors in removal order give the remaining total for every cut
    remaining = np.concatenate([np.cumsum(e[order][::-1])[::-1], [0.0]])
    n = e.size
    cuts = np.array([int(np.floor(f * n)) for f in fractions])
    curve = remaining[cuts] / (n - cuts)
    return curve / curve[0] if curve[0] > 0 else np.zeros_like(curve)


def ause(uncertainty, errors, fractions=SPARSIFICATION_FRACTIONS) -> float:
    """Area under the sparsification error curve (method minus error oracle)."""
    fractions = np.asarray(fractions, dtype=np.float64)
    method = sparsification_curve(uncertainty, errors, fractions)
    oracle = sparsification_curve(errors, errors, fractions)
    return float(np.trapezoid(method - oracle, fractions))


def _sweep(scores, labels):
    """Cumulative TP/FP counts at each distinct score, thresholds descending (score >= t)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp, int(y.sum()), int((~y).sum())


def auprc(scores, labels) -> float:
    """Average precision ``sum_n (R_n - R_{n-1}) P_n`` over distinct thresholds; positives = OoD."""
    _, tp, fp, n_pos, _ = _sweep(scores, labels)
    if n_pos == 0:
        raise UndefinedMetricError("AuPRC needs at least one positive")
    recall = tp / n_pos
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def fpr_at_95_tpr(scores, labels, target: float = 0.95) -> float:
    """False positive rate at the largest threshold whose TPR reaches ``target``."""
    _, tp, fp, n_pos, n_neg = _sweep(scores, labels)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("FPR95 needs positives and negatives")
    first = int(np.argmax(tp / n_pos >= target))
    return float(fp[first] / n_neg)


def _mean(values) -> Fraction:
    return sum(values, Fraction(0)) / len(values) if values else Fraction(0)


def _component_stats(pred_mask: np.ndarray, gt_mask: np.ndarray):
    """Per-threshold sIoU list, PPV list and (TP, FN, FP) counts for one image, as exact fractions."""
    gt_seg = connected_components(gt_mask.astype(np.int8))
    pred_seg = connected_components(pred_mask.astype(np.int8))
    gt_lab = np.where(gt_mask, gt_seg.labels, 0)
    pred_lab = np.where(pred_mask, pred_seg.labels, 0)
    sious, ppvs = [], []
    for gid in np.unique(gt_lab[gt_lab > 0]):
        a = gt_lab == gid
        hit = np.unique(pred_lab[a & (pred_lab > 0)])
        a_hat = np.isin(pred_lab, hit) & (pred_lab > 0)
        excluded = a_hat & gt_mask & ~a
        inter = np.count_nonzero(a & a_hat)
        union = np.count_nonzero((a | a_hat) & ~excluded)
        sious.append(Fraction(inter, union))
    for pid in np.unique(pred_lab[pred_lab > 0]):
        q = pred_lab == pid
        ppvs.append(Fraction(np.count_nonzero(q & gt_mask), np.count_nonzero(q)))
    return sious, ppvs


def ood_segment_metrics(score_maps, gt_masks, thresholds=DEFAULT_THRESHOLDS) -> dict[str, float]:
    """Component-level sIoU, PPV and F1 averaged over binarization thresholds.

    ``score_maps`` must already be normalized to [0, 1]; a single H x W map or a
    sequence of maps (with matching masks) is accepted.  A pixel is predicted
    OoD when its score is >= the threshold.  Counts are accumulated over all
    images per threshold; arithmetic is exact until the final conversion.
    """
    if np.ndim(score_maps) == 2:
        score_maps, gt_masks = [score_maps], [gt_masks]
    gts = [np.asarray(g).astype(bool) for g in gt_masks]
    if not any(g.any() for g in gts):
        raise UndefinedMetricError("ground-truth OoD mask is empty")
    per_t = {"sIoU": [], "PPV": [], "F1": []}
    rows = []
    for tau in thresholds:
        sious, ppvs = [], []
        for scores, gt in zip(score_maps, gts):
            scores = np.asarray(scores, dtype=np.float64)
            if scores.shape != gt.shape:
                raise ValueError(f"score map {scores.shape} and mask {gt.shape} differ")
            s, p = _component_stats(scores >= tau, gt)
            sious += s
            ppvs += p
        frac_tau = Fraction(str(tau))
        tp = sum(1 for v in sious if v > frac_tau)
        fn = len(sious) - tp
        fp = sum(1 for v in ppvs if v <= frac_tau)
        f1 = Fraction(2 * tp, 2 * tp + fn + fp) if (2 * tp + fn + fp) else Fraction(0)
        per_t["sIoU"].append(_mean(sious))
        per_t["PPV"].append(_mean(ppvs))
        per_t["F1"].append(f1)
        rows.append({"threshold": tau, "sIoU": float(_mean(sious)), "PPV": float(_mean(ppvs)),
                     "F1": float(f1), "TP": tp, "FN": fn, "FP": fp})
    out = {k: float(_mean(v)) for k, v in per_t.items()}
    out["per_threshold"] = rows
    return out


@dataclass
class MetricsReport:
    metrics: dict
    config: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "config": self.config, "provenance": self.provenance}

    def write_json(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def write_reports_csv(reports: list[MetricsReport], path) -> Path:
    """One row per report: provenance columns, then every scalar metric."""
    prov_keys = sorted({k for r in reports for k in r.provenance})
    metric_keys = sorted({k for r in reports for k, v in r.metrics.items() if v is None or np.isscalar(v)})
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(prov_keys + metric_keys)
        for r in reports:
            writer.writerow([r.provenance.get(k, "") for k in prov_keys] +
                            ["" if r.metrics.get(k) is None else r.metrics.get(k) for k in metric_keys])
    return path
