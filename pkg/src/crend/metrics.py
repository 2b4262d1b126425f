"""Overlap, surface-distance and follicle detection metrics.

Conventions: DSC and JC are percentages and equal 100 when both masks are
empty. Surface distances are NaN (reported as missing) when either mask is
empty. Components use 26-connectivity, surfaces 6-connectivity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import LabelMask

CONNECT26 = np.ones((3, 3, 3), dtype=bool)
CONNECT6 = ndimage.generate_binary_structure(3, 1)

METRIC_COLUMNS = ("dsc", "jc", "hd", "asd", "fd", "md", "fd_small", "md_small", "count_error")


def _pair(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 100.0
    return 200.0 * int(np.logical_and(a, b).sum()) / total


def jaccard(a, b) -> float:
    a, b = _pair(a, b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 100.0
    return 100.0 * int(np.logical_and(a, b).sum()) / union


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask (the
    volume exterior counts as outside)."""
    mask = np.asarray(mask).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=CONNECT6, border_value=0)


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dist[src]


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0)) -> tuple[float, float]:
    """``(hd, asd)`` in mm between the two mask surfaces; NaN if either is empty."""
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        return math.nan, math.nan
    sa, sb = surface(a), surface(b)
    d_ab = _directed(sa, sb, spacing)
    d_ba = _directed(sb, sa, spacing)
    hd = max(float(d_ab.max()), float(d_ba.max()))
    asd = (float(d_ab.mean()) + float(d_ba.mean())) / 2.0
    return hd, asd


def hausdorff(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    return surface_distances(a, b, spacing)[0]


def avg_surface_distance(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    return surface_distances(a, b, spacing)[1]


def label_components(mask) -> tuple[np.ndarray, int]:
    labels, n = ndimage.label(np.asarray(mask).astype(bool), structure=CONNECT26)
    return labels, int(n)


@dataclass
class DetectionResult:
    fd: float
    md: float
    iou: np.ndarray            # (n_pred, n_gt)
    false_pred: np.ndarray     # (n_pred,) bool
    missed_gt: np.ndarray      # (n_gt,) bool
    pred_labels: np.ndarray
    gt_labels: np.ndarray
    hits: np.ndarray           # iou > threshold

    @property
    def n_pred(self) -> int:
        return len(self.false_pred)

    @property
    def n_gt(self) -> int:
        return len(self.missed_gt)

    @property
    def matches(self) -> list[tuple[int, int]]:
        """(pred component, gt component) pairs above the IoU threshold, 1-based."""
        return [(int(i) + 1, int(j) + 1) for i, j in zip(*np.nonzero(self.hits))]


def component_iou(pred_labels, n_pred, gt_labels, n_gt) -> np.ndarray:
    joint = np.bincount(
        (pred_labels.ravel().astype(np.int64) * (n_gt + 1) + gt_labels.ravel()),
        minlength=(n_pred + 1) * (n_gt + 1),
    ).reshape(n_pred + 1, n_gt + 1)
    inter = joint[1:, 1:].astype(np.float64)
    pred_size = joint[1:, :].sum(axis=1).astype(np.float64)
    gt_size = joint[:, 1:].sum(axis=0).astype(np.float64)
    union = pred_size[:, None] + gt_size[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def detect_match(pred, gt, iou_thresh: float = 0.30, spacing=None) -> DetectionResult:
    """False/missed follicle detections at an IoU threshold.

    A predicted component is a false detection when its IoU with every
    ground-truth component is at most ``iou_thresh``; a ground-truth
    component is missed when no prediction exceeds it. FD is relative to the
    number of predicted components, MD to the number of ground-truth ones.
    """
    pred, gt = _pair(pred, gt)
    pl, n_pred = label_components(pred)
    gl, n_gt = label_components(gt)
    iou = component_iou(pl, n_pred, gl, n_gt)
    hits = iou > iou_thresh
    false_pred = ~hits.any(axis=1)
    missed_gt = ~hits.any(axis=0)
    fd = 100.0 * false_pred.sum() / n_pred if n_pred else 0.0
    md = 100.0 * missed_gt.sum() / n_gt if n_gt else 0.0
    return DetectionResult(float(fd), float(md), iou, false_pred, missed_gt, pl, gl, hits)


def equivalent_radius(voxels: np.ndarray, spacing) -> np.ndarray:
    """Radius in mm of the sphere with the same volume as each component."""
    volume = np.asarray(voxels, dtype=np.float64) * float(np.prod(spacing))
    return np.cbrt(3.0 * volume / (4.0 * math.pi))


def small_follicle_filter(labels: np.ndarray, n: int, spacing, radius_mm: float = 5.0) -> np.ndarray:
    """1-based ids of components whose equivalent radius is below ``radius_mm``."""
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    radii = equivalent_radius(sizes, spacing)
    return np.flatnonzero(radii < radius_mm) + 1


def counting_error(pred, gt) -> int:
    pred, gt = _pair(pred, gt)
    return abs(label_components(pred)[1] - label_components(gt)[1])


def _stratified_rate(flags: np.ndarray, keep_ids: np.ndarray) -> float:
    if len(keep_ids) == 0:
        return 0.0
    return 100.0 * float(flags[keep_ids - 1].sum()) / len(keep_ids)


def evaluate(pred: LabelMask, gt: LabelMask, spacing=None, iou_thresh: float = 0.30, small_radius_mm: float = 5.0) -> dict:
    """All metrics for one volume as a flat dict.

    Keys are ``<structure>_<metric>`` for the overlap and distance metrics,
    plus follicle instance statistics and ``*_missing`` flags for undefined
    distances.
    """
    spacing = tuple(spacing or gt.spacing)
    report = {}
    for name in ("follicle", "ovary"):
        a, b = getattr(pred, name), getattr(gt, name)
        hd, asd = surface_distances(a, b, spacing)
        report[f"{name}_dsc"] = dice(a, b)
        report[f"{name}_jc"] = jaccard(a, b)
        report[f"{name}_hd"] = hd
        report[f"{name}_asd"] = asd
        report[f"{name}_hd_missing"] = math.isnan(hd)
    det = detect_match(pred.follicle, gt.follicle, iou_thresh, spacing)
    small_pred = small_follicle_filter(det.pred_labels, det.n_pred, spacing, small_radius_mm)
    small_gt = small_follicle_filter(det.gt_labels, det.n_gt, spacing, small_radius_mm)
    report.update(
        fd=det.fd,
        md=det.md,
        fd_small=_stratified_rate(det.false_pred, small_pred),
        md_small=_stratified_rate(det.missed_gt, small_gt),
        count_error=abs(det.n_pred - det.n_gt),
        n_pred=det.n_pred,
        n_gt=det.n_gt,
    )
    return report


def aggregate(reports: list[dict]) -> dict:
    """Mean and sample standard deviation of every numeric field, ignoring
    missing (NaN) values."""
    out = {"n_volumes": len(reports)}
    if not reports:
        return out
    keys = [k for k, v in reports[0].items() if isinstance(v, (int, float)) and not isinstance(v, bool)]
    for key in keys:
        vals = np.array([r[key] for r in reports], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        out[key] = {
            "mean": float(vals.mean()) if len(vals) else None,
            "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0 if len(vals) else None,
            "n": int(len(vals)),
        }
    return out
