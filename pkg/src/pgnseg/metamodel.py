"""Linear meta classification (IoU = 0 vs > 0) and meta regression (IoU) on segment features."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

DEFAULT_RIDGE = 1e-6


class UndefinedMetricError(ValueError):
    pass


class DegenerateTargetError(ValueError):
    pass


class SingularSystemError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        return cls(mean, np.where(std > 0, std, 0.0))

    def transform(self, x: np.ndarray) -> np.ndarray:
        centered = np.asarray(x, dtype=np.float64) - self.mean
        # zero-variance columns map to 0
        safe = np.where(self.scale > 0, self.scale, 1.0)
        return np.where(self.scale > 0, centered / safe, 0.0)


@dataclass
class LinearModel:
    weights: np.ndarray
    intercept: float
    kind: str  # "logistic" or "least-squares"
    standardizer: Standardizer
    feature_names: list = field(default_factory=list)
    n_iter: int = 0

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        return self.standardizer.transform(x) @ self.weights + self.intercept

    def predict(self, x: np.ndarray) -> np.ndarray:
        z = self.decision_function(x)
        if self.kind == "logistic":
            return 1.0 / (1.0 + np.exp(-z))
        return np.clip(z, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "feature_names": list(self.feature_names),
            "weights": [float(v) for v in self.weights],
            "intercept": float(self.intercept),
            "feature_mean": [float(v) for v in self.standardizer.mean],
            "feature_scale": [float(v) for v in self.standardizer.scale],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        std = Standardizer(np.array(d["feature_mean"]), np.array(d["feature_scale"]))
        return cls(np.array(d["weights"]), float(d["intercept"]), d["kind"], std, list(d["feature_names"]))


def fit_logistic(
    x: np.ndarray,
    targets: np.ndarray,
    l2: float = 1e-3,
    max_iter: int = 100,
    tol: float = 1e-8,
    feature_names=None,
) -> LinearModel:
    """L2-regularized logistic regression fitted by Newton iterations.

    Minimizes ``mean(log-loss) + l2/2 * |w|^2`` on standardized features; the
    intercept is not penalized.  Stops when the gradient's max-norm is below ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if x.shape[0] < 2:
        raise DegenerateTargetError("need at least 2 rows")
    if t.min() == t.max():
        raise DegenerateTargetError("targets contain a single class")
    std = Standardizer.fit(x)
    z = np.column_stack([std.transform(x), np.ones(len(t))])
    n, d = z.shape
    reg = np.full(d, l2)
    reg[-1] = 0.0
    beta = np.zeros(d)
    it = 0
    for it in range(1, max_iter + 1):
        prob = 1.0 / (1.0 + np.exp(-(z @ beta)))
        grad = z.T @ (prob - t) / n + reg * beta
        if np.max(np.abs(grad)) < tol:
            break
        hess = (z.T * (prob * (1 - prob))) @ z / n + np.diag(reg) + 1e-12 * np.eye(d)
        beta = beta - np.linalg.solve(hess, grad)
    return LinearModel(beta[:-1], float(beta[-1]), "logistic", std, list(feature_names or []), it)


def fit_least_squares(
    x: np.ndarray,
    targets: np.ndarray,
    ridge: float = DEFAULT_RIDGE,
    feature_names=None,
) -> LinearModel:
    """Closed-form ridge regression on standardized features (intercept unpenalized)."""
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if x.shape[0] == 0:
        raise DegenerateTargetError("no training rows")
    std = Standardizer.fit(x)
    z = std.transform(x)
    n, d = z.shape
    if ridge <= 0 and n < d + 1:
        raise SingularSystemError(f"{n} rows cannot determine {d} weights without a ridge term")
    zc = z - z.mean(axis=0)
    gram = zc.T @ zc + ridge * np.eye(d)
    if ridge <= 0 and np.linalg.matrix_rank(gram) < d:
        raise SingularSystemError("normal matrix is singular; use a positive ridge")
    w = np.linalg.solve(gram, zc.T @ (t - t.mean()))
    intercept = float(t.mean() - z.mean(axis=0) @ w)
    return LinearModel(w, intercept, "least-squares", std, list(feature_names or []))


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve from the rank-sum statistic, ties at average rank."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AuROC needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def r_squared(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Coefficient of determination; defined as 0 for constant targets."""
    pred = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    ss_tot = np.sum((t - t.mean()) ** 2)
    if ss_tot == 0:
        return 0.0
    return float(1.0 - np.sum((t - pred) ** 2) / ss_tot)


def split_mask(image_ids, segment_ids, train_fraction: float = 0.7) -> np.ndarray:
    """True for training rows, chosen by SHA-256 of ``"<image_id>:<segment_id>"``."""
    out = []
    for img, seg in zip(image_ids, segment_ids):
        digest = hashlib.sha256(f"{int(img)}:{int(seg)}".encode()).digest()
        out.append(int.from_bytes(digest[:8], "big") / 2.0**64 < train_fraction)
    return np.array(out, dtype=bool)


def evaluate_meta_models(table, columns=None, l2: float = 1e-3, ridge: float = DEFAULT_RIDGE,
                         train_fraction: float = 0.7) -> dict:
    """Fit both meta models on the training split and score them on the held-out rows.

    Rows with undefined IoU are dropped.  Metrics that cannot be computed are
    returned as None with the reason under ``"errors"``.
    """
    keep = ~np.isnan(table.iou)
    names = list(table.feature_names)
    col_idx = [names.index(c) for c in columns] if columns else list(range(len(names)))
    x = table.features[keep][:, col_idx]
    iou = table.iou[keep]
    train = split_mask(table.image_id[keep], table.segment_id[keep], train_fraction)
    test = ~train
    result = {"n_train": int(train.sum()), "n_test": int(test.sum()), "auroc": None, "r2": None, "errors": {}}
    sel_names = [names[i] for i in col_idx]
    try:
        clf = fit_logistic(x[train], iou[train] > 0, l2=l2, feature_names=sel_names)
        result["auroc"] = auroc(clf.decision_function(x[test]), iou[test] > 0)
        result["classifier"] = clf.to_dict()
    except (UndefinedMetricError, DegenerateTargetError) as exc:
        result["errors"]["auroc"] = str(exc)
    try:
        if test.sum() == 0:
            raise UndefinedMetricError("no held-out rows")
        reg = fit_least_squares(x[train], iou[train], ridge=ridge, feature_names=sel_names)
        result["r2"] = r_squared(reg.predict(x[test]), iou[test])
        result["regressor"] = reg.to_dict()
    except (UndefinedMetricError, DegenerateTargetError, SingularSystemError) as exc:
        result["errors"]["r2"] = str(exc)
    return result
