"""Rotated IoU, KITTI-style average precision and depth statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .boxes import Box3D, corners_8_array, corners_bev
from .camera import Intrinsics
from .depth import SparseDepthMap
from .tensor import ContractError

OUTLIER_THRESHOLDS = (0.1, 0.3, 0.5, 1.0, 2.0)

# KITTI difficulty levels: (min 2D box height px, max occlusion level, max truncation)
KITTI_DIFFICULTY = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}
DIFFICULTIES = tuple(KITTI_DIFFICULTY)


class UndefinedCorrelationError(ValueError):
    pass


@dataclass
class DetectionRecord:
    box: Box3D
    score: float
    class_id: int = 0
    image_id: int = 0

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ContractError("detection score must be finite")


# ---------------------------------------------------------------------------
# overlaps
# ---------------------------------------------------------------------------


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip(subject: list, a: np.ndarray, b: np.ndarray) -> list:
    """Keep the part of ``subject`` on the left of the directed edge a->b."""
    def side(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    out = []
    n = len(subject)
    for i in range(n):
        cur, prev = subject[i], subject[i - 1]
        sc, sp = side(cur), side(prev)
        if sc >= 0:
            if sp < 0:
                t = sp / (sp - sc)
                out.append(prev + t * (cur - prev))
            out.append(cur)
        elif sp >= 0:
            t = sp / (sp - sc)
            out.append(prev + t * (cur - prev))
    return out


def convex_intersection(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of convex polygon ``p`` by convex CCW polygon ``q``."""
    poly = [np.asarray(v, dtype=np.float64) for v in p]
    for i in range(len(q)):
        if not poly:
            break
        poly = _clip(poly, q[i], q[(i + 1) % len(q)])
    return np.array(poly).reshape(-1, 2)


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    return polygon_area(convex_intersection(corners_bev(a), corners_bev(b)))


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    area_a, area_b = a.l * a.w, b.l * b.w
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = bev_intersection_area(a, b)
    union = area_a + area_b - inter
    return float(min(1.0, max(0.0, inter / union))) if union > 0 else 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    vol_a, vol_b = a.l * a.w * a.h, b.l * b.w * b.h
    if vol_a <= 0 or vol_b <= 0:
        return 0.0
    top = max(a.y - a.h / 2, b.y - b.h / 2)
    bottom = min(a.y + a.h / 2, b.y + b.h / 2)
    overlap_h = max(0.0, bottom - top)
    if overlap_h == 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * overlap_h
    return float(min(1.0, max(0.0, inter / (vol_a + vol_b - inter))))


def box_to_2d(box: Box3D, k: Intrinsics, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Image rectangle (u1, v1, u2, v2) enclosing the projected corners (clipped to the image if sized)."""
    c = corners_8_array(box.as_array()[None])[0]
    z = np.maximum(c[:, 2], 1e-3)
    u = k.fx * c[:, 0] / z + k.cu
    v = k.fy * c[:, 1] / z + k.cv
    r = np.array([u.min(), v.min(), u.max(), v.max()])
    if image_size is not None:
        h, w = image_size
        r = np.clip(r, [0, 0, 0, 0], [w - 1, h - 1, w - 1, h - 1])
    return r


def iou_2d(a: np.ndarray, b: np.ndarray) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def projected_iou_fn(k: Intrinsics, image_size=None) -> Callable[[Box3D, Box3D], float]:
    return lambda a, b: iou_2d(box_to_2d(a, k, image_size), box_to_2d(b, k, image_size))


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------


def recall_positions(recall_points: int) -> np.ndarray:
    if recall_points == 11:
        return np.linspace(0.0, 1.0, 11)
    if recall_points == 40:
        return np.arange(1, 41) / 40.0
    raise ValueError("recall_points must be 11 or 40")


def _group_gts(gts) -> dict:
    if isinstance(gts, Mapping):
        return {k: list(v) for k, v in gts.items()}
    return {0: list(gts)}


def match_detections(dets: Sequence[DetectionRecord], gts, iou_fn, iou_thresh: float,
                     ignore: Mapping | None = None) -> tuple[list[int], list[float], int]:
    """Greedy score-ordered matching.

    Returns (is_tp flags, scores) for counted detections in descending score
    order, and the number of counted ground truths.  Detections that match an
    ignored GT (and no counted GT) are dropped.
    """
    groups = _group_gts(gts)
    ignore = ignore or {}
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    used = {img: [False] * len(boxes) for img, boxes in groups.items()}
    n_gt = sum(
        sum(1 for j in range(len(boxes)) if not ignore.get(img, [False] * len(boxes))[j])
        for img, boxes in groups.items()
    )
    flags, scores = [], []
    for i in order:
        d = dets[i]
        boxes = groups.get(d.image_id, [])
        ign = ignore.get(d.image_id, [False] * len(boxes))
        best_j, best_iou = -1, -1.0
        ign_hit = False
        for j, g in enumerate(boxes):
            if used[d.image_id][j]:
                continue
            iou = iou_fn(d.box, g)
            if iou < iou_thresh:
                continue
            if ign[j]:
                ign_hit = True
            elif iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            used[d.image_id][best_j] = True
            flags.append(1)
            scores.append(d.score)
        elif ign_hit:
            continue
        else:
            flags.append(0)
            scores.append(d.score)
    return flags, scores, n_gt


def average_precision(dets: Sequence[DetectionRecord], gts, iou_fn: Callable = rotated_iou_bev,
                      iou_thresh: float = 0.7, recall_points: int = 40, ignore: Mapping | None = None) -> float:
    """Interpolated AP sampled at 11 or 40 recall positions.

    ``gts`` is a list of boxes (single image) or a mapping image_id -> boxes.
    No GT and no detections gives 1.0 by convention.
    """
    flags, _, n_gt = match_detections(dets, gts, iou_fn, iou_thresh, ignore)
    if n_gt == 0:
        return 1.0 if not flags else 0.0
    if not flags:
        return 0.0
    tp = np.cumsum(flags)
    n = np.arange(1, len(flags) + 1)
    precision = tp / n
    recall = tp / n_gt
    # interpolated precision: max precision at any recall >= r
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in recall_positions(recall_points):
        hit = np.nonzero(recall >= r - 1e-12)[0]
        total += float(interp[hit[0]]) if len(hit) else 0.0
    return total / len(recall_positions(recall_points))


def distance_binned_ap(dets: Sequence[DetectionRecord], gts, bin_width: float = 5.0, range_max: float = 40.0,
                       iou_fn: Callable = rotated_iou_bev, iou_thresh: float = 0.7,
                       recall_points: int = 40) -> list[float | None]:
    """AP per [lo, hi) depth bin of box centre z; ``None`` where a bin has no objects."""
    n_bins = int(round(range_max / bin_width))
    groups = _group_gts(gts)
    out: list[float | None] = []
    for b in range(n_bins):
        lo, hi = b * bin_width, (b + 1) * bin_width
        last = b == n_bins - 1

        def inside(z):
            return lo <= z < hi or (last and z == hi)

        g = {img: [x for x in boxes if inside(x.z)] for img, boxes in groups.items()}
        d = [x for x in dets if inside(x.box.z)]
        if not d and not any(g.values()):
            out.append(None)
            continue
        out.append(average_precision(d, g, iou_fn, iou_thresh, recall_points))
    return out


# ---------------------------------------------------------------------------
# depth statistics
# ---------------------------------------------------------------------------


def lower_median(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    return float(v[(len(v) - 1) // 2])


def depth_error_stats(pred, gt: SparseDepthMap, z_range: tuple[float, float] | None = None) -> tuple[float, float]:
    """(mean, median) absolute error over valid GT pixels inside ``z_range``; lower-middle median."""
    p = np.asarray(pred.data if hasattr(pred, "data") else pred, dtype=np.float64)
    if z_range is not None:
        gt = gt.in_range(z_range)
    if gt.count == 0:
        raise ContractError("no valid ground-truth depth pixels in range")
    err = np.abs(p[gt.valid] - gt.depth[gt.valid])
    return float(err.mean()), lower_median(err)


def box_depth_precision(pred, gt: SparseDepthMap, box_pixels: np.ndarray, outlier_thresh: float) -> float:
    """Fraction of masked valid pixels whose depth error is below ``outlier_thresh``."""
    p = np.asarray(pred.data if hasattr(pred, "data") else pred, dtype=np.float64)
    sel = gt.valid & np.asarray(box_pixels, dtype=bool)
    if not sel.any():
        raise ContractError("no valid ground-truth pixels inside the box mask")
    return float(np.mean(np.abs(p[sel] - gt.depth[sel]) < outlier_thresh))


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ContractError("pearson needs two equal-length sequences of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant input")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


# ---------------------------------------------------------------------------
# difficulty and reports
# ---------------------------------------------------------------------------


def difficulty_level(height_px: float, occlusion: int, truncation: float, image_height: int = 375) -> int:
    """0 easy, 1 moderate, 2 hard, -1 ignored.  Height thresholds scale with image height / 375."""
    scale = image_height / 375.0
    for level, (min_h, max_occ, max_trunc) in enumerate(KITTI_DIFFICULTY.values()):
        if height_px >= min_h * scale and occlusion <= max_occ and truncation <= max_trunc:
            return level
    return -1


@dataclass
class EvalReport:
    ap_3d: dict = field(default_factory=dict)
    ap_bev: dict = field(default_factory=dict)
    ap_2d: dict = field(default_factory=dict)
    depth_mean: float = float("nan")
    depth_median: float = float("nan")
    binned_ap: list = field(default_factory=list)
    correlations: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def table(self) -> str:
        cols = ("easy", "moderate", "hard", "all")
        lines = [f"{'metric':<10}" + "".join(f"{c:>10}" for c in cols)]
        for name, d in (("AP_3D", self.ap_3d), ("AP_BEV", self.ap_bev), ("AP_2D", self.ap_2d)):
            cells = "".join(f"{100 * d[c]:>10.2f}" if c in d else f"{'-':>10}" for c in cols)
            lines.append(f"{name:<10}{cells}")
        lines.append(f"depth mean/median abs error: {self.depth_mean:.4f} / {self.depth_median:.4f} m")
        return "\n".join(lines)

    def key_values(self) -> str:
        out = []
        for name, d in (("ap_3d", self.ap_3d), ("ap_bev", self.ap_bev), ("ap_2d", self.ap_2d)):
            for k, v in d.items():
                out.append(f"{name}_{k}={v:.6f}")
        out.append(f"depth_mean={self.depth_mean:.6f}")
        out.append(f"depth_median={self.depth_median:.6f}")
        for i, v in enumerate(self.binned_ap):
            out.append(f"binned_ap_{i}={'absent' if v is None else f'{v:.6f}'}")
        for k, v in self.correlations.items():
            out.append(f"pcc_{k}={v:.6f}")
        return "\n".join(out)
