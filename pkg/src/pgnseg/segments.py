"""Segment decomposition of a predicted label map and per-segment feature tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

IGNORE_LABEL = 255
IOU_DILATION = 32

# 8-neighbourhood offsets already visited in raster order
_BACK_NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, -1))


@dataclass(frozen=True)
class SegmentMap:
    labels: np.ndarray  # H x W, ids 1..count
    class_of: dict
    count: int


def _find(parent: list, i: int) -> int:
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        parent[i], i = root, parent[i]
    return root


def connected_components(pred: np.ndarray) -> SegmentMap:
    """8-connected components of equal value, ids numbered in raster order of first pixel."""
    pred = np.asarray(pred)
    h, w = pred.shape
    prov = np.zeros((h, w), dtype=np.int64)
    parent = [0]
    vals = pred.tolist()
    for a in range(h):
        row = vals[a]
        for b in range(w):
            v = row[b]
            roots = []
            for da, db in _BACK_NEIGHBOURS:
                na, nb = a + da, b + db
                if 0 <= na and 0 <= nb < w and vals[na][nb] == v:
                    roots.append(_find(parent, prov[na, nb]))
            if not roots:
                parent.append(len(parent))
                prov[a, b] = len(parent) - 1
                continue
            r = min(roots)
            for other in roots:
                parent[other] = r
            prov[a, b] = r
    # provisional roots are created in raster order, so the smallest root of a
    # component is the label of its first pixel
    roots = np.array([_find(parent, i) for i in range(len(parent))])
    uniq = np.unique(roots[1:])
    remap = np.zeros(len(parent), dtype=np.int64)
    remap[uniq] = np.arange(1, len(uniq) + 1)
    labels = remap[roots[prov]]
    flat = labels.ravel()
    first = np.unique(flat, return_index=True)[1]
    class_of = {int(i + 1): pred.ravel()[idx].item() for i, idx in enumerate(first)}
    return SegmentMap(labels, class_of, len(uniq))


def inner_boundary_split(seg: SegmentMap | np.ndarray) -> np.ndarray:
    """Boolean H x W map, True where all 8 neighbours are in-image and in the same segment."""
    labels = seg.labels if isinstance(seg, SegmentMap) else np.asarray(seg)
    h, w = labels.shape
    padded = np.pad(labels, 1, constant_values=-1)
    inner = np.ones((h, w), dtype=bool)
    for da in (-1, 0, 1):
        for db in (-1, 0, 1):
            if da or db:
                inner &= padded[1 + da : 1 + da + h, 1 + db : 1 + db + w] == labels
    return inner


def dispersion_maps(probs: np.ndarray) -> dict[str, np.ndarray]:
    """Normalized entropy ``E`` and probability margin ``M = 1 - p_max + p_second``."""
    c = probs.shape[0]
    plogp = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    entropy = np.clip(-plogp.sum(axis=0) / np.log(c), 0.0, 1.0)
    top2 = np.sort(probs, axis=0)[-2:]
    margin = 1.0 - top2[1] + top2[0]
    return {"E": entropy, "M": margin}


def segment_iou(
    seg: SegmentMap,
    gt: np.ndarray,
    ignore_label: int = IGNORE_LABEL,
    dilation: int = IOU_DILATION,
) -> dict[int, float]:
    """Adjusted IoU of every predicted segment against the ground truth of its class.

    For segment Q of class c, the ground-truth side is the union of the
    8-connected class-c ground-truth components that touch Q, minus pixels
    predicted as c by other segments, clipped to Q's bounding box grown by
    ``dilation`` pixels.  Ignore-label pixels count nowhere; a segment lying
    entirely on ignore pixels gets NaN.
    """
    gt = np.asarray(gt)
    if gt.shape != seg.labels.shape:
        raise ValueError(f"gt shape {gt.shape} differs from prediction {seg.labels.shape}")
    h, w = gt.shape
    valid = gt != ignore_label
    gt_comp = connected_components(gt).labels
    class_lut = np.zeros(seg.count + 1, dtype=np.int64)
    for sid, cls in seg.class_of.items():
        class_lut[sid] = cls
    pred_class = class_lut[seg.labels]
    out = {}
    for sid in range(1, seg.count + 1):
        q = seg.labels == sid
        c = seg.class_of[sid]
        rows = np.flatnonzero(q.any(axis=1))
        cols = np.flatnonzero(q.any(axis=0))
        r0, r1 = max(rows[0] - dilation, 0), min(rows[-1] + dilation + 1, h)
        c0, c1 = max(cols[0] - dilation, 0), min(cols[-1] + dilation + 1, w)
        win = (slice(r0, r1), slice(c0, c1))
        q_loc, v_loc = q[win], valid[win]
        gt_c = gt[win] == c
        touched = np.unique(gt_comp[win][q_loc & gt_c])
        g_loc = np.isin(gt_comp[win], touched) & gt_c
        g_loc &= ~((pred_class[win] == c) & ~q_loc)
        inter = np.count_nonzero(q_loc & g_loc & v_loc)
        union = np.count_nonzero((q_loc | g_loc) & v_loc)
        out[sid] = inter / union if union else float("nan")
    return out


_MOMENT_SUFFIXES = ("", "_in", "_bd", "_rel", "_in_rel")


def feature_names(num_classes: int, heatmap_names=()) -> list[str]:
    names = ["S", "S_in", "S_bd", "S_rel", "S_in_rel"]
    names += [f"P_{k}" for k in range(num_classes)]
    for d in ("E", "M"):
        names += [f"mean_{d}{s}" for s in _MOMENT_SUFFIXES]
    for g in heatmap_names:
        names += [f"mean_{g}{s}" for s in _MOMENT_SUFFIXES]
        names += [f"var_{g}{s}" for s in _MOMENT_SUFFIXES]
    return names


@dataclass
class SegmentTable:
    """Per-segment features (rows) with IoU targets."""

    features: np.ndarray  # n_segments x n_features
    feature_names: list
    segment_id: np.ndarray
    image_id: np.ndarray
    segment_class: np.ndarray
    iou: np.ndarray
    inner_empty: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.features.shape[0]

    @classmethod
    def concat(cls, tables: list["SegmentTable"]) -> "SegmentTable":
        names = tables[0].feature_names
        if any(t.feature_names != names for t in tables):
            raise ValueError("tables have different feature columns")
        return cls(
            np.concatenate([t.features for t in tables]),
            list(names),
            np.concatenate([t.segment_id for t in tables]),
            np.concatenate([t.image_id for t in tables]),
            np.concatenate([t.segment_class for t in tables]),
            np.concatenate([t.iou for t in tables]),
            np.concatenate([t.inner_empty for t in tables]),
        )

    def to_csv(self, path) -> None:
        """Columns: image_id, segment_id, class, iou, inner_empty, then the feature columns."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "segment_id", "class", "iou", "inner_empty", *self.feature_names])
            for i in range(len(self)):
                writer.writerow(
                    [
                        int(self.image_id[i]),
                        int(self.segment_id[i]),
                        int(self.segment_class[i]),
                        repr(float(self.iou[i])),
                        int(self.inner_empty[i]),
                        *(repr(float(v)) for v in self.features[i]),
                    ]
                )


def _moments(values: np.ndarray, idx: np.ndarray, n_seg: int, mask: np.ndarray):
    """Per-segment mean and population variance over pixels where ``mask`` holds."""
    sel = idx[mask]
    v = values.ravel()[mask]
    cnt = np.bincount(sel, minlength=n_seg + 1)[1:].astype(np.float64)
    total = np.bincount(sel, weights=v, minlength=n_seg + 1)[1:]
    safe = np.maximum(cnt, 1)
    mean = np.where(cnt > 0, total / safe, 0.0)
    centered = v - mean[sel - 1]
    var = np.bincount(sel, weights=centered * centered, minlength=n_seg + 1)[1:] / safe
    return mean, np.where(cnt > 0, var, 0.0)


def build_feature_table(
    probs: np.ndarray,
    seg: SegmentMap,
    heatmaps=(),
    gt: np.ndarray | None = None,
    image_id: int = 0,
    ignore_label: int = IGNORE_LABEL,
    dilation: int = IOU_DILATION,
) -> SegmentTable:
    """Hand-crafted segment features plus mean/variance features for each heatmap.

    ``heatmaps`` holds objects with ``scores`` and ``name`` (e.g. GradientScoreMap)
    or ``(name, array)`` pairs.  Empty inner sets yield zero inner features and
    set ``inner_empty``.
    """
    probs = np.asarray(probs)
    c = probs.shape[0]
    n = seg.count
    idx = seg.labels.ravel()
    all_px = np.ones(idx.shape, bool)
    inner = inner_boundary_split(seg).ravel()
    size = np.bincount(idx, minlength=n + 1)[1:].astype(np.float64)
    s_in = np.bincount(idx[inner], minlength=n + 1)[1:].astype(np.float64)
    s_bd = size - s_in
    s_rel = size / s_bd
    s_in_rel = s_in / s_bd
    cols = [size, s_in, s_bd, s_rel, s_in_rel]
    for k in range(c):
        cols.append(_moments(probs[k], idx, n, all_px)[0])

    def pooled(values, with_var):
        m, v = _moments(values, idx, n, all_px)
        m_in, v_in = _moments(values, idx, n, inner)
        m_bd, v_bd = _moments(values, idx, n, ~inner)
        out = [m, m_in, m_bd, m * s_rel, m_in * s_in_rel]
        if with_var:
            out += [v, v_in, v_bd, v * s_rel, v_in * s_in_rel]
        return out

    disp = dispersion_maps(probs)
    for d in ("E", "M"):
        cols += pooled(disp[d], False)
    names = []
    for hm in heatmaps:
        name, values = (hm if isinstance(hm, tuple) else (hm.name, hm.scores))
        if values.shape != seg.labels.shape:
            raise ValueError(f"heatmap {name} has shape {values.shape}, expected {seg.labels.shape}")
        names.append(name)
        cols += pooled(np.asarray(values, dtype=np.float64), True)
    features = np.column_stack(cols)
    if gt is not None:
        ious = segment_iou(seg, gt, ignore_label, dilation)
        iou = np.array([ious[i] for i in range(1, n + 1)])
    else:
        iou = np.full(n, np.nan)
    return SegmentTable(
        features=features,
        feature_names=feature_names(c, names),
        segment_id=np.arange(1, n + 1),
        image_id=np.full(n, image_id),
        segment_class=np.array([seg.class_of[i] for i in range(1, n + 1)]),
        iou=iou,
        inner_empty=s_in == 0,
    )
