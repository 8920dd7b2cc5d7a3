"""KITTI text formats, LiDAR-to-depth projection, synthetic stereo scenes and flip augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .boxes import Box3D, boxes_to_array, corners_8_array, normalize_angle
from .camera import Intrinsics, StereoRig
from .depth import SparseDepthMap
from .detection import CLASS_DEFAULTS
from .evaluation import bev_intersection_area
from .volumes import VoxelGrid


class ParseError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

_MATRIX_KEYS = {"P0": 12, "P1": 12, "P2": 12, "P3": 12}


@dataclass
class Calibration:
    P2: np.ndarray
    P3: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def rig(self) -> StereoRig:
        fx, fy = self.P2[0, 0], self.P2[1, 1]
        if abs(self.P3[0, 0] - fx) > 1e-6:
            raise ParseError(f"P2/P3 focal lengths differ: {fx} vs {self.P3[0, 0]}")
        baseline = (self.P2[0, 3] - self.P3[0, 3]) / fx
        return StereoRig(Intrinsics(fx, fy, self.P2[0, 2], self.P2[1, 2]), baseline)

    @classmethod
    def from_rig(cls, rig: StereoRig) -> "Calibration":
        k = rig.intrinsics.matrix()
        p2 = np.hstack([k, np.zeros((3, 1))])
        p3 = p2.copy()
        p3[0, 3] = -rig.fx * rig.baseline
        return cls(p2, p3)


def parse_calib(text: str) -> Calibration:
    mats: dict[str, np.ndarray] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if ":" not in line:
            raise ParseError(f"line {lineno}: expected 'KEY: values'")
        key, rest = line.split(":", 1)
        key = key.strip()
        try:
            vals = np.array([float(t) for t in rest.split()], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        want = _MATRIX_KEYS.get(key)
        if want is not None and vals.size != want:
            raise ParseError(f"line {lineno}: {key} needs {want} values, got {vals.size}")
        mats[key] = vals
    for key in ("P2", "P3"):
        if key not in mats:
            raise ParseError(f"missing {key}")
    extra = {k: v for k, v in mats.items() if k not in ("P2", "P3")}
    return Calibration(mats["P2"].reshape(3, 4), mats["P3"].reshape(3, 4), extra)


def format_calib(c: Calibration) -> str:
    lines = []
    items = [("P2", c.P2.reshape(-1)), ("P3", c.P3.reshape(-1))] + [(k, np.ravel(v)) for k, v in c.extra.items()]
    for key, vals in items:
        lines.append(f"{key}: " + " ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


@dataclass
class LabelRecord:
    cls: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: tuple[float, float, float, float]
    dims: tuple[float, float, float]  # (h, w, l)
    location: tuple[float, float, float]  # bottom-face centre
    rotation_y: float
    score: float | None = None

    def to_box(self) -> Box3D:
        h, w, l = self.dims
        x, y, z = self.location
        return Box3D(x, y - h / 2, z, h, w, l, self.rotation_y)

    @classmethod
    def from_box(cls, box: Box3D, name: str = "Car", truncation: float = 0.0, occlusion: int = 0,
                 bbox=(0.0, 0.0, 0.0, 0.0), score: float | None = None) -> "LabelRecord":
        alpha = box.theta - math.atan2(box.x, box.z)
        return cls(name, truncation, occlusion, alpha, tuple(bbox), (box.h, box.w, box.l),
                   (box.x, box.y + box.h / 2, box.z), box.theta, score)


def parse_labels(text: str) -> list[LabelRecord]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split()
        if not parts:
            continue
        if len(parts) not in (15, 16):
            raise ParseError(f"line {lineno}: expected 15 fields (16 with score), got {len(parts)}")
        try:
            v = [float(t) for t in parts[1:]]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        out.append(LabelRecord(
            parts[0], v[0], int(v[1]), v[2], tuple(v[3:7]), tuple(v[7:10]), tuple(v[10:13]), v[13],
            v[14] if len(v) == 15 else None,
        ))
    return out


def format_labels(records: Sequence[LabelRecord]) -> str:
    lines = []
    for r in records:
        vals = [r.truncation, r.occlusion, r.alpha, *r.bbox, *r.dims, *r.location, r.rotation_y]
        fields = [r.cls] + [str(int(v)) if i == 1 else repr(float(v)) for i, v in enumerate(vals)]
        if r.score is not None:
            fields.append(repr(float(r.score)))
        lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def gt_boxes(records: Sequence[LabelRecord], classes: Sequence[str] = ("Car",)) -> list[Box3D]:
    """Boxes of the requested classes; DontCare rows never appear."""
    return [r.to_box() for r in records if r.cls in classes and r.cls != "DontCare"]


def format_detections(dets, class_name: str = "Car") -> str:
    """One ``class score x y z h w l theta`` line per detection."""
    lines = []
    for d in dets:
        b = d.box
        lines.append(" ".join([class_name] + [repr(float(v)) for v in (d.score, b.x, b.y, b.z, b.h, b.w, b.l, b.theta)]))
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# LiDAR
# ---------------------------------------------------------------------------


def lidar_to_sparse_depth(points, k: Intrinsics, image_size: tuple[int, int]) -> SparseDepthMap:
    """Z-buffer projection of camera-frame points onto the nearest pixel."""
    h, w = image_size
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pts = pts[pts[:, 2] > 0]
    u = np.floor(k.fx * pts[:, 0] / pts[:, 2] + k.cu + 0.5).astype(np.int64)
    v = np.floor(k.fy * pts[:, 1] / pts[:, 2] + k.cv + 0.5).astype(np.int64)
    ok = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    depth = np.full(h * w, np.inf)
    np.minimum.at(depth, v[ok] * w + u[ok], pts[ok, 2])
    depth = depth.reshape(h, w)
    valid = np.isfinite(depth)
    return SparseDepthMap(np.where(valid, depth, 0.0), valid)


def depth_to_points(depth: SparseDepthMap, k: Intrinsics) -> np.ndarray:
    v, u = np.nonzero(depth.valid)
    z = depth.depth[v, u]
    return np.stack([(u - k.cu) * z / k.fx, (v - k.cv) * z / k.fy, z], axis=-1)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


def toy_grid() -> VoxelGrid:
    return VoxelGrid((-6.4, 6.4), (-0.4, 2.0), (3.2, 16.0), (0.4, 0.4, 0.4))


def toy_rig() -> StereoRig:
    return StereoRig(Intrinsics(48.0, 48.0, 47.5, 9.5), 1.2)


@dataclass(frozen=True)
class SynthConfig:
    image_size: tuple[int, int] = (32, 96)  # (H, W)
    rig: StereoRig = field(default_factory=toy_rig)
    grid: VoxelGrid = field(default_factory=toy_grid)
    class_name: str = "Car"
    n_boxes: tuple[int, int] = (1, 2)
    z_center: tuple[float, float] = (5.5, 13.0)
    yaw_range: tuple[float, float] = (math.pi / 2 - 0.4, math.pi / 2 + 0.4)
    size_jitter: float = 0.05
    ground_y: float = 1.65
    texture_channels: int = 3
    texture_period: tuple[float, float] = (0.5, 1.5)
    depth_fraction: float = 0.3
    min_visible_pixels: int = 12
    min_gap: float = 0.5
    max_tries: int = 200


@dataclass
class SceneSample:
    left: np.ndarray  # (C, H, W)
    right: np.ndarray
    depth: SparseDepthMap  # left view
    boxes: list[Box3D]
    rig: StereoRig
    grid: VoxelGrid
    depth_right: SparseDepthMap | None = None
    labels: list[LabelRecord] = field(default_factory=list)
    seed: int | None = None

    @property
    def image_size(self) -> tuple[int, int]:
        return self.left.shape[1:]


@dataclass
class _Texture:
    freqs: np.ndarray  # (C, K, 3)
    phases: np.ndarray  # (C, K)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        arg = np.einsum("ckj,nj->cnk", self.freqs, pts) + self.phases[:, None, :]
        return np.sin(arg).sum(-1) / math.sqrt(self.freqs.shape[1])


def _make_texture(rng: np.random.Generator, cfg: SynthConfig, k: int = 3) -> _Texture:
    c = cfg.texture_channels
    dirs = rng.normal(size=(c, k, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    periods = rng.uniform(*cfg.texture_period, size=(c, k, 1))
    return _Texture(dirs * (2 * np.pi / periods), rng.uniform(0, 2 * np.pi, size=(c, k)))


def _ray_box(origin: np.ndarray, dirs: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Entry parameter t of rays origin + t*dirs into an oriented box (inf if missed)."""
    c, s = math.cos(box[6]), math.sin(box[6])
    rt = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])  # world -> local
    o = rt @ (origin - box[:3])
    d = dirs @ rt.T
    half = np.array([box[5], box[3], box[4]]) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.where(d == 0, np.where(np.abs(o) <= half, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(d == 0, np.where(np.abs(o) <= half, np.inf, -np.inf), np.maximum(t1, t2))
    tn, tf = lo.max(-1), hi.min(-1)
    hit = (tn <= tf) & (tn > 0)
    return np.where(hit, tn, np.inf)


def render_view(boxes: np.ndarray, texture: _Texture, k: Intrinsics, cam_x: float, u: np.ndarray, v: np.ndarray,
                ground_y: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray-cast continuous pixel coordinates of a camera at (cam_x, 0, 0).

    Returns (features (C+1, *shape), depth z (inf where nothing is hit), hit
    object id (-1 ground, -2 nothing)).
    """
    shape = np.shape(u)
    dirs = np.stack([(np.ravel(u) - k.cu) / k.fx, (np.ravel(v) - k.cv) / k.fy, np.ones(np.size(u))], axis=-1)
    origin = np.array([cam_x, 0.0, 0.0])
    with np.errstate(divide="ignore"):
        t_ground = np.where(dirs[:, 1] > 0, ground_y / dirs[:, 1], np.inf)
    best = t_ground
    ids = np.where(np.isfinite(t_ground), -1, -2)
    for i, b in enumerate(boxes):
        t = _ray_box(origin, dirs, b)
        closer = t < best
        best = np.where(closer, t, best)
        ids = np.where(closer, i, ids)
    hit = np.isfinite(best)
    pts = origin + dirs * np.where(hit, best, 0.0)[:, None]
    feats = np.where(hit[None], texture(pts), 0.0)
    obj = (ids >= 0).astype(np.float64)[None]
    out = np.concatenate([feats, obj]).reshape((-1,) + shape)
    return out, best.reshape(shape), ids.reshape(shape)


def _pixel_grid(image_size):
    h, w = image_size
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return u, v


def _sample_boxes(rng: np.random.Generator, cfg: SynthConfig, n: int) -> np.ndarray:
    cls = CLASS_DEFAULTS[cfg.class_name]
    h0, w0, l0 = cls.size
    k = cfg.rig.intrinsics
    boxes: list[np.ndarray] = []
    for _ in range(n):
        for _try in range(cfg.max_tries):
            h, w, l = (s * (1 + rng.uniform(-cfg.size_jitter, cfg.size_jitter)) for s in (h0, w0, l0))
            z = rng.uniform(*cfg.z_center)
            half_fov = (cfg.image_size[1] - 1 - k.cu) / k.fx
            xmax = min(half_fov * (z - l / 2) - w / 2, cfg.grid.x_range[1] - l / 2)
            if xmax <= 0:
                continue
            x = rng.uniform(-xmax, xmax)
            theta = rng.uniform(*cfg.yaw_range)
            cand = np.array([x, cfg.ground_y - h / 2, z, h, w, l, theta])
            grown = cand.copy()
            grown[4:6] += 2 * cfg.min_gap
            if all(bev_intersection_area(Box3D.from_array(grown), Box3D.from_array(b)) == 0.0 for b in boxes):
                boxes.append(cand)
                break
        else:
            raise GenerationError(f"could not place box {len(boxes) + 1} after {cfg.max_tries} tries")
    return np.array(boxes).reshape(-1, 7)


def synth_scene(seed: int, cfg: SynthConfig | None = None) -> SceneSample:
    """Deterministic textured stereo scene of boxes standing on a ground plane."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    texture = _make_texture(rng, cfg)
    k = cfg.rig.intrinsics
    u, v = _pixel_grid(cfg.image_size)
    n = int(rng.integers(cfg.n_boxes[0], cfg.n_boxes[1] + 1))
    for _attempt in range(cfg.max_tries):
        boxes = _sample_boxes(rng, cfg, n)
        left, zl, ids = render_view(boxes, texture, k, 0.0, u, v, cfg.ground_y)
        counts = [(ids == i).sum() for i in range(len(boxes))]
        if all(c >= cfg.min_visible_pixels for c in counts):
            break
    else:
        raise GenerationError("could not find a placement with every box visible")
    right, zr, _ = render_view(boxes, texture, k, cfg.rig.baseline, u, v, cfg.ground_y)
    keep = rng.random(zl.shape) < cfg.depth_fraction
    keep_r = rng.random(zr.shape) < cfg.depth_fraction
    depth = SparseDepthMap.from_dense(np.where(keep, zl, np.inf))
    depth_r = SparseDepthMap.from_dense(np.where(keep_r, zr, np.inf))
    box_list = [Box3D.from_array(b) for b in boxes]
    labels = [_synth_label(b, ids == i, k, cfg) for i, b in enumerate(box_list)]
    return SceneSample(left, right, depth, box_list, cfg.rig, cfg.grid, depth_r, labels, seed)


def _synth_label(box: Box3D, visible: np.ndarray, k: Intrinsics, cfg: SynthConfig) -> LabelRecord:
    c = corners_8_array(box.as_array()[None])[0]
    u = k.fx * c[:, 0] / c[:, 2] + k.cu
    v = k.fy * c[:, 1] / c[:, 2] + k.cv
    full = (u.max() - u.min()) * (v.max() - v.min())
    h, w = cfg.image_size
    cu = np.clip([u.min(), u.max()], 0, w - 1)
    cv = np.clip([v.min(), v.max()], 0, h - 1)
    inside = (cu[1] - cu[0]) * (cv[1] - cv[0])
    trunc = float(1 - inside / full) if full > 0 else 1.0
    # occlusion: visible pixels relative to the in-image projected footprint
    frac = visible.sum() / max(inside, 1.0)
    occ = 0 if frac > 0.6 else (1 if frac > 0.3 else 2)
    return LabelRecord.from_box(box, cfg.class_name, round(trunc, 4), occ, (cu[0], cv[0], cu[1], cv[1]))


def horizontal_flip(s: SceneSample) -> SceneSample:
    """Mirror both views and swap them so the rig stays rectified.

    The mirrored right camera becomes the new left camera at the origin, so
    box x maps to baseline - x and yaw to pi - yaw.
    """
    k = s.rig.intrinsics
    w = s.left.shape[2]
    rig = StereoRig(Intrinsics(k.fx, k.fy, w - 1 - k.cu, k.cv), s.rig.baseline)

    def mirror(dm: SparseDepthMap | None):
        return None if dm is None else SparseDepthMap(dm.depth[:, ::-1].copy(), dm.valid[:, ::-1].copy())

    b = s.rig.baseline
    boxes = [replace(x, x=b - x.x, theta=normalize_angle(math.pi - x.theta)) for x in s.boxes]
    labels = []
    for r, box in zip(s.labels, boxes):
        u1, v1, u2, v2 = r.bbox
        labels.append(LabelRecord.from_box(box, r.cls, r.truncation, r.occlusion, (w - 1 - u2, v1, w - 1 - u1, v2)))
    return SceneSample(
        s.right[:, :, ::-1].copy(), s.left[:, :, ::-1].copy(),
        mirror(s.depth_right) if s.depth_right is not None else mirror(s.depth),
        boxes, rig, s.grid, mirror(s.depth), labels, s.seed,
    )


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def save_scene(s: SceneSample, root) -> Path:
    d = Path(root) / f"scene_{s.seed}"
    d.mkdir(parents=True, exist_ok=True)
    T.save(d / "left.ten", s.left)
    T.save(d / "right.ten", s.right)
    T.save(d / "depth.ten", s.depth.depth)
    if s.depth_right is not None:
        T.save(d / "depth_right.ten", s.depth_right.depth)
    labels = s.labels or [LabelRecord.from_box(b) for b in s.boxes]
    (d / "boxes.txt").write_text(format_labels(labels))
    (d / "calib.txt").write_text(format_calib(Calibration.from_rig(s.rig)))
    return d


def load_scene(path, grid: VoxelGrid, classes: Sequence[str] = ("Car",)) -> SceneSample:
    d = Path(path)
    labels = parse_labels((d / "boxes.txt").read_text())
    rig = parse_calib((d / "calib.txt").read_text()).rig

    def dm(name):
        p = d / name
        return SparseDepthMap.from_dense(T.load(p).data) if p.exists() else None

    seed = int(d.name.split("_", 1)[1]) if d.name.startswith("scene_") else None
    return SceneSample(T.load(d / "left.ten").data, T.load(d / "right.ten").data, dm("depth.ten"),
                       gt_boxes(labels, classes), rig, grid, dm("depth_right.ten"),
                       [r for r in labels if r.cls in classes], seed)


def parse_seed_range(spec: str) -> list[int]:
    """'a..b' (inclusive) or a comma list."""
    if ".." in spec:
        a, b = spec.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(t) for t in spec.split(",") if t]


def scene_boxes_array(s: SceneSample) -> np.ndarray:
    return boxes_to_array(s.boxes)
