"""End-to-end tiny stereo 3D detector: config, network, losses, training and evaluation."""

from __future__ import annotations

import configparser
import dataclasses
import io
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .boxes import Box3D, boxes_to_array
from .camera import Intrinsics, StereoRig
from .data import SceneSample, SynthConfig, depth_to_points, horizontal_flip, synth_scene
from .depth import depth_loss, occupancy_loss, reduce_to_cost, soft_argmin, voxelize_points
from .detection import (
    CLASS_DEFAULTS, NMS_IOU_THRESHOLD, AnchorSet, AssignmentResult, assign_targets, bev_nms, centerness_loss,
    decode_array, focal_loss, generate_anchors, regression_loss,
)
from .evaluation import (
    DetectionRecord, EvalReport, average_precision, difficulty_level, distance_binned_ap, iou_3d,
    lower_median, projected_iou_fn, rotated_iou_bev,
)
from .tensor import ContractError, Tensor
from .volumes import (
    GeometricVolume, VoxelGrid, apply_plan, attention_concat, build_disparity_cost_volume, build_psv, cv_warp_plan,
    depth_candidates, lift_plan, psv_plan, voxel_feature_mode, warp_plan,
)

log = logging.getLogger(__name__)

CONSTRUCTION_LABELS = {"img_3dv": "IMG→3DV", "cv_3dgv": "IMG→CV→3DV", "psv_3dgv": "IMG→PSCV→3DV"}
SUPERVISION_LABELS = {
    ("img_3dv", "none"): "×", ("img_3dv", "occupancy"): "3DV", ("cv_3dgv", "depth"): "CV",
    ("psv_3dgv", "none"): "×", ("psv_3dgv", "depth"): "PSCV",
}
VALID_ROWS = tuple(SUPERVISION_LABELS)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    # grid
    x_range: tuple = (-6.4, 6.4)
    y_range: tuple = (-0.4, 2.0)
    z_range: tuple = (3.2, 16.0)
    voxel: tuple = (0.4, 0.4, 0.4)
    # camera / synthetic data
    image_size: tuple = (32, 96)
    fx: float = 48.0
    fy: float = 48.0
    cu: float = 47.5
    cv: float = 9.5
    baseline: float = 1.2
    n_boxes: tuple = (1, 2)
    depth_fraction: float = 0.3
    train_seeds: tuple = (0, 199)
    test_seeds: tuple = (10000, 10049)
    # network
    stride: int = 1
    backbone_channels: tuple = (8, 8)
    psv_channels: tuple = (8,)
    tower_channels: int = 16
    bev_channels: int = 32
    bev_kernel: int = 5
    bev_layers: int = 3
    # model variant
    construction_mode: str = "psv_3dgv"
    supervision: str = "depth"
    feature_mode: str = "last_features"
    att_concat: bool = True
    flip: bool = False
    regression_mode: str = "separable"
    corner_flip_min: bool = False
    class_name: str = "Car"
    gamma: float = 1.0
    # optimisation
    steps: int = 1000
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    w_depth: float = 1.0
    w_cls: float = 1.0
    w_reg: float = 1.0
    w_ctr: float = 1.0
    # evaluation
    score_threshold: float = 0.05
    pre_nms_top: int = 64
    max_detections: int = 10
    nms_threshold: float = NMS_IOU_THRESHOLD
    iou_threshold: float = 0.5
    recall_points: int = 40

    def __post_init__(self):
        if (self.construction_mode, self.supervision) not in VALID_ROWS:
            raise ContractError(
                f"construction={self.construction_mode!r} with supervision={self.supervision!r} is not an ablation row"
            )
        if self.feature_mode not in ("occupancy", "probability", "last_features"):
            raise ContractError(f"unknown feature_mode {self.feature_mode!r}")
        if self.regression_mode not in ("separable", "joint_corners"):
            raise ContractError(f"unknown regression_mode {self.regression_mode!r}")

    # derived objects
    @property
    def grid(self) -> VoxelGrid:
        return VoxelGrid(tuple(self.x_range), tuple(self.y_range), tuple(self.z_range), tuple(self.voxel))

    @property
    def rig(self) -> StereoRig:
        return StereoRig(Intrinsics(self.fx, self.fy, self.cu, self.cv), self.baseline)

    @property
    def class_cfg(self):
        return dataclasses.replace(CLASS_DEFAULTS[self.class_name], gamma=self.gamma)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(image_size=tuple(self.image_size), rig=self.rig, grid=self.grid,
                           class_name=self.class_name, n_boxes=tuple(self.n_boxes),
                           depth_fraction=self.depth_fraction)

    @property
    def label(self) -> str:
        return f"{CONSTRUCTION_LABELS[self.construction_mode]} [{SUPERVISION_LABELS[(self.construction_mode, self.supervision)]}]"

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    # text format
    SECTIONS = {
        "grid": ("x_range", "y_range", "z_range", "voxel"),
        "data": ("image_size", "fx", "fy", "cu", "cv", "baseline", "n_boxes", "depth_fraction", "train_seeds",
                 "test_seeds"),
        "network": ("stride", "backbone_channels", "psv_channels", "tower_channels", "bev_channels", "bev_kernel",
                    "bev_layers"),
        "model": ("construction_mode", "supervision", "feature_mode", "att_concat", "flip", "regression_mode",
                  "corner_flip_min", "class_name", "gamma"),
        "train": ("steps", "lr", "beta1", "beta2", "eps", "seed", "w_depth", "w_cls", "w_reg", "w_ctr"),
        "eval": ("score_threshold", "pre_nms_top", "max_detections", "nms_threshold", "iou_threshold",
                 "recall_points"),
    }

    def to_text(self) -> str:
        out = []
        for sec, keys in self.SECTIONS.items():
            out.append(f"[{sec}]")
            for k in keys:
                v = getattr(self, k)
                out.append(f"{k} = {' '.join(str(x) for x in v) if isinstance(v, tuple) else v}")
            out.append("")
        return "\n".join(out)

    @classmethod
    def from_text(cls, text: str, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        base = base or cls()
        kw = {}
        types = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(cls)}
        known = {k for keys in cls.SECTIONS.values() for k in keys}
        for sec in parser.sections():
            for k, raw in parser.items(sec):
                if k not in known:
                    raise ContractError(f"unknown config key [{sec}] {k}")
                kw[k] = _coerce(raw, types[k], getattr(base, k))
        return dataclasses.replace(base, **kw)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text())


def _coerce(raw: str, typ, default):
    raw = raw.strip()
    if typ is tuple:
        vals = raw.split()
        conv = int if all(isinstance(x, int) for x in default) else float
        return tuple(conv(v) for v in vals)
    if typ is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class TinyNetwork:
    """Parameter container; shapes follow the config."""

    def __init__(self, cfg: PipelineConfig, in_channels: int = 4):
        self.cfg = cfg
        self.in_channels = in_channels
        rng = np.random.default_rng(cfg.seed)
        self.params: dict[str, Tensor] = {}
        c_prev = in_channels
        for i, c in enumerate(cfg.backbone_channels):
            self._conv(rng, f"backbone{i}", c, c_prev, (3, 3))
            c_prev = c
        feat_c = self.feature_channels
        n_anchor = CLASS_DEFAULTS[cfg.class_name].n_theta
        if cfg.construction_mode == "img_3dv":
            c_vol = 2 * feat_c
            chans = list(cfg.psv_channels)
            for i, c in enumerate(chans):
                self._conv(rng, f"lift{i}", c, c_vol, (3, 3, 3))
                c_vol = c
            self._conv(rng, "occ", 1, c_vol, (1, 1, 1))
            gv_c = c_vol
        else:
            c_vol = 2 * feat_c
            for i, c in enumerate(cfg.psv_channels):
                k = (1, 1, 1) if i == 0 else (3, 3, 3)
                self._conv(rng, f"psv{i}", c, c_vol, k)
                c_vol = c
            self._conv(rng, "cost", 1, c_vol, (3, 3, 3))
            gv_c = c_vol if cfg.feature_mode == "last_features" else 1
            if cfg.att_concat:
                gv_c += feat_c
        ct = cfg.tower_channels
        self._conv(rng, "tower0", ct, gv_c, (3, 3, 3))
        self._conv(rng, "tower1", ct, ct, (3, 3, 3))
        h_v = cfg.grid.dims[1]
        h_out = (h_v + 2 - 3) // 2 + 1
        c_bev = ct * h_out
        kb = cfg.bev_kernel
        for i in range(cfg.bev_layers):
            self._conv(rng, f"bev{i}", cfg.bev_channels, c_bev, (kb, kb))
            c_bev = cfg.bev_channels
        self._conv(rng, "cls", n_anchor, c_bev, (1, 1), std=0.01)
        self._conv(rng, "reg", 7 * n_anchor, c_bev, (1, 1), std=0.01)
        self._conv(rng, "ctr", n_anchor, c_bev, (1, 1), std=0.01)
        prior = 0.01
        self.params["cls_b"].data[:] = -math.log((1 - prior) / prior)

    @property
    def feature_channels(self) -> int:
        c = self.cfg.backbone_channels[-1]
        return c + self.in_channels if self.cfg.stride == 1 else c

    def _conv(self, rng, name, c_out, c_in, ksize, std=None):
        fan_in = c_in * int(np.prod(ksize))
        s = math.sqrt(2.0 / fan_in) if std is None else std
        self.params[name + "_w"] = Tensor(rng.normal(0, s, size=(c_out, c_in) + tuple(ksize)), requires_grad=True)
        self.params[name + "_b"] = Tensor(np.zeros(c_out), requires_grad=True)

    def conv(self, name, x, stride=1, relu=True, padding=None):
        w = self.params[name + "_w"]
        pad = tuple(k // 2 for k in w.shape[2:]) if padding is None else padding
        y = T.conv_nd(x, w, stride, pad, bias=self.params[name + "_b"])
        return T.relu(y) if relu else y

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, v in state.items():
            self.params[k] = Tensor(np.array(v, dtype=np.float64), requires_grad=True)

    def save(self, path) -> None:
        np.savez(path, __config__=np.array(self.cfg.to_text()), __in_channels__=np.array(self.in_channels),
                 **self.state())

    @classmethod
    def load(cls, path) -> "TinyNetwork":
        z = np.load(path, allow_pickle=False)
        cfg = PipelineConfig.from_text(str(z["__config__"]))
        net = cls(cfg, int(z["__in_channels__"]))
        net.load_state({k: z[k] for k in z.files if not k.startswith("__")})
        return net


@dataclass
class Outputs:
    depth: Tensor | None
    cls_logits: Tensor  # (N,)
    deltas: Tensor  # (N, 7)
    ctr_logits: Tensor  # (N,)
    occupancy: Tensor | None = None  # (D_V, H_V, W_V) probabilities
    head_shape: tuple = ()


class PlanCache:
    """Interpolation plans depend only on geometry; reuse them across scenes."""

    def __init__(self):
        self._plans = {}

    def get(self, key, build):
        if key not in self._plans:
            self._plans[key] = build()
        return self._plans[key]


_PLANS = PlanCache()


def _max_disparity(cfg: PipelineConfig, rig: StereoRig) -> int:
    return int(math.ceil(rig.fx * rig.baseline / (cfg.z_range[0] * cfg.stride))) + 2


def forward(net: TinyNetwork, sample: SceneSample, cfg: PipelineConfig | None = None,
            plans: PlanCache | None = None) -> Outputs:
    cfg = cfg or net.cfg
    plans = plans or _PLANS
    if sample.grid != cfg.grid:
        raise ContractError("sample and config grids differ")
    if sample.left.shape[0] != net.in_channels:
        raise ContractError(f"network expects {net.in_channels} input channels, sample has {sample.left.shape[0]}")
    rig, grid, s = sample.rig, cfg.grid, cfg.stride
    k_feat = rig.intrinsics.scaled(s)

    def backbone(img):
        x = Tensor(img)
        f = x
        for i in range(len(cfg.backbone_channels)):
            last = i == len(cfg.backbone_channels) - 1
            f = net.conv(f"backbone{i}", f, stride=s if i == 0 else 1, relu=not last)
        return T.concat([x, f], axis=0) if s == 1 else f

    fl, fr = backbone(sample.left), backbone(sample.right)
    depth = occ = None
    if cfg.construction_mode == "img_3dv":
        lp_l = plans.get(("lift", rig, fl.shape, grid, s, 0.0), lambda: lift_plan(grid, k_feat, fl.shape, 1, 0.0))
        lp_r = plans.get(("lift", rig, fr.shape, grid, s, rig.baseline),
                         lambda: lift_plan(grid, k_feat, fr.shape, 1, rig.baseline))
        vol = T.concat([apply_plan(fl, *lp_l), apply_plan(fr, *lp_r)], axis=0)
        for i in range(len(cfg.psv_channels)):
            vol = net.conv(f"lift{i}", vol)
        occ_logit = net.conv("occ", vol, relu=False)
        occ = T.reshape(T.sigmoid(occ_logit), occ_logit.shape[1:])
        gv = vol
    else:
        if cfg.construction_mode == "psv_3dgv":
            cands = depth_candidates(grid)
            pp = plans.get(("psv", rig, fl.shape, grid, s), lambda: psv_plan(fl.shape, rig, cands, s))
            frustum = build_psv(fl, fr, rig, grid, s, plan=pp).feature
        else:
            frustum = build_disparity_cost_volume(fl, fr, _max_disparity(cfg, rig))
            cands = np.arange(frustum.shape[1], dtype=np.float64)
        layers = [(net.params[f"psv{i}_w"], net.params[f"psv{i}_b"]) for i in range(len(cfg.psv_channels))]
        layers.append((net.params["cost_w"], net.params["cost_b"]))
        cv = reduce_to_cost(frustum, layers, candidates=cands)
        if cfg.construction_mode == "psv_3dgv":
            wp = plans.get(("warp", rig, frustum.shape, grid, s), lambda: warp_plan(grid, k_feat, frustum.shape, cands, 1))
            depth = soft_argmin(cv)
        else:
            wp = plans.get(("cvwarp", rig, frustum.shape, grid, s),
                           lambda: cv_warp_plan(grid, StereoRig(k_feat, rig.baseline), frustum.shape, 1))
            disp = T.clamp(soft_argmin(cv), 0.25, float(frustum.shape[1]))
            depth = Tensor(np.full(disp.shape, k_feat.fx * rig.baseline)) / disp
        enc = voxel_feature_mode(cv.cost, cfg.feature_mode, cv.features)
        gv_feat = apply_plan(enc, *wp)
        if cfg.att_concat:
            prob = T.softmax(-T.reshape(cv.cost, (1,) + cv.cost.shape), axis=1)
            prob_gv = apply_plan(prob, *wp)
            lp = plans.get(("lift", rig, fl.shape, grid, s, 0.0), lambda: lift_plan(grid, k_feat, fl.shape, 1, 0.0))
            gv_feat = attention_concat(GeometricVolume(gv_feat, grid), fl, prob_gv, k_feat, 1, plan=lp).feature
        gv = gv_feat
    t = net.conv("tower0", gv)
    t = net.conv("tower1", t, stride=(1, 2, 1))
    c, d, h, w = t.shape
    bev = T.reshape(T.transpose(t, (0, 2, 1, 3)), (c * h, d, w))
    for i in range(cfg.bev_layers):
        bev = net.conv(f"bev{i}", bev)
    cls = net.conv("cls", bev, relu=False)
    reg = net.conv("reg", bev, relu=False)
    ctr = net.conv("ctr", bev, relu=False)
    a = cls.shape[0]
    deltas = T.reshape(T.transpose(T.reshape(reg, (a, 7, d, w)), (0, 2, 3, 1)), (a * d * w, 7))
    return Outputs(depth, T.reshape(cls, (-1,)), deltas, T.reshape(ctr, (-1,)), occ, (a, d, w))


# ---------------------------------------------------------------------------
# targets and loss
# ---------------------------------------------------------------------------


@dataclass
class Targets:
    sample: SceneSample
    anchors: AnchorSet
    assign: AssignmentResult
    gt_array: np.ndarray
    occupancy: np.ndarray | None = None


def make_targets(sample: SceneSample, cfg: PipelineConfig, anchors: AnchorSet | None = None) -> Targets:
    anchors = anchors or generate_anchors(cfg.grid, cfg.class_cfg)
    gt = boxes_to_array(sample.boxes)
    assign = assign_targets(anchors, gt, cfg.gamma, cfg.grid)
    occ = None
    if cfg.supervision == "occupancy":
        occ = voxelize_points(depth_to_points(sample.depth, sample.rig.intrinsics), cfg.grid)
    return Targets(sample, anchors, assign, gt, occ)


def loss_terms(out: Outputs, tg: Targets, cfg: PipelineConfig) -> dict[str, Tensor]:
    terms: dict[str, Tensor] = {}
    if cfg.supervision == "depth" and out.depth is not None:
        gt = tg.sample.depth
        if cfg.stride != 1:
            raise ContractError("depth supervision at stride > 1 needs an upsampled cost volume")
        gt = gt.in_range((cfg.z_range[0], cfg.z_range[1]))
        if gt.count:
            terms["depth"] = depth_loss(out.depth, gt) * cfg.w_depth
    elif cfg.supervision == "occupancy" and out.occupancy is not None:
        terms["depth"] = occupancy_loss(out.occupancy, tg.occupancy) * cfg.w_depth
    terms["cls"] = focal_loss(out.cls_logits, tg.assign) * cfg.w_cls
    if tg.assign.n_pos:
        terms["reg"] = regression_loss(tg.anchors, out.deltas, tg.assign, tg.gt_array, cfg.regression_mode,
                                       corner_flip_min=cfg.corner_flip_min) * cfg.w_reg
        terms["ctr"] = centerness_loss(out.ctr_logits, tg.assign) * cfg.w_ctr
    return terms


def total_loss(out: Outputs, tg: Targets, cfg: PipelineConfig) -> tuple[Tensor, dict[str, float]]:
    """Unweighted (unit-weight by default) sum of the active loss terms."""
    terms = loss_terms(out, tg, cfg)
    names = list(terms)
    total = terms[names[0]]
    for n in names[1:]:
        total = total + terms[n]
    return total, {n: terms[n].item() for n in names}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        T.zero_grad(self.params)


def make_scenes(seeds: Sequence[int], cfg: PipelineConfig) -> list[SceneSample]:
    sc = cfg.synth_config()
    return [synth_scene(s, sc) for s in seeds]


def seed_list(rng_pair) -> list[int]:
    a, b = rng_pair
    return list(range(int(a), int(b) + 1))


@dataclass
class TrainResult:
    net: TinyNetwork
    history: list[dict]
    seconds: float


def train_toy(cfg: PipelineConfig, scenes: Sequence[SceneSample] | None = None, out_dir=None,
              net: TinyNetwork | None = None, log_every: int = 50) -> TrainResult:
    """Adam on randomly ordered scenes, one scene per step; deterministic given ``cfg.seed``."""
    t0 = time.perf_counter()
    scenes = list(scenes) if scenes is not None else make_scenes(seed_list(cfg.train_seeds), cfg)
    net = net or TinyNetwork(cfg, scenes[0].left.shape[0] if scenes else 4)
    anchors = generate_anchors(cfg.grid, cfg.class_cfg)
    targets = [make_targets(s, cfg, anchors) for s in scenes]
    flipped: dict[int, Targets] = {}
    opt = Adam(net.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed + 7919)
    history: list[dict] = []
    order: list[int] = []
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for step in range(cfg.steps):
        if not order:
            order = list(rng.permutation(len(targets)))
        i = order.pop()
        tg = targets[i]
        if cfg.flip and rng.random() < 0.5:
            if i not in flipped:
                flipped[i] = make_targets(horizontal_flip(tg.sample), cfg, anchors)
            tg = flipped[i]
        opt.zero_grad()
        outputs = forward(net, tg.sample, cfg)
        loss, terms = total_loss(outputs, tg, cfg)
        value = loss.item()
        if not math.isfinite(value):
            if out:
                net.save(out / "diverged.npz")
            raise TrainingDiverged(f"non-finite loss at step {step}: {terms}")
        T.backward(loss)
        opt.step()
        history.append({"step": step, "loss": value, **terms})
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f %s", step, value, {k: round(v, 4) for k, v in terms.items()})
    if out:
        net.save(out / "model.npz")
        with open(out / "loss_curve.txt", "w") as fh:
            keys = sorted({k for h in history for k in h} - {"step"})
            fh.write("step " + " ".join(keys) + "\n")
            for h in history:
                fh.write(f"{h['step']} " + " ".join(f"{h.get(k, float('nan')):.6g}" for k in keys) + "\n")
        (out / "config.ini").write_text(cfg.to_text())
    return TrainResult(net, history, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def detect(net: TinyNetwork, sample: SceneSample, cfg: PipelineConfig | None = None, anchors: AnchorSet | None = None,
           image_id: int = 0, outputs: Outputs | None = None) -> list[DetectionRecord]:
    cfg = cfg or net.cfg
    anchors = anchors or generate_anchors(cfg.grid, cfg.class_cfg)
    out = outputs or forward(net, sample, cfg)
    scores = _sigmoid(out.cls_logits.data) * _sigmoid(out.ctr_logits.data)
    order = np.argsort(-scores, kind="stable")[: cfg.pre_nms_top]
    order = order[scores[order] > cfg.score_threshold]
    boxes = decode_array(anchors.boxes[order], out.deltas.data[order], anchors.n_theta)
    box_objs = [Box3D.from_array(b) for b in boxes]
    kept = bev_nms(box_objs, scores[order], cfg.nms_threshold)[: cfg.max_detections]
    return [DetectionRecord(box_objs[j], float(scores[order][j]), 0, image_id) for j in kept]


def evaluate(net: TinyNetwork, scenes: Sequence[SceneSample], cfg: PipelineConfig | None = None,
             recall_points: int | None = None) -> EvalReport:
    cfg = cfg or net.cfg
    rp = recall_points or cfg.recall_points
    anchors = generate_anchors(cfg.grid, cfg.class_cfg)
    dets: list[DetectionRecord] = []
    gts: dict[int, list[Box3D]] = {}
    levels: dict[int, list[int]] = {}
    errors = []
    for i, s in enumerate(scenes):
        out = forward(net, s, cfg)
        dets.extend(detect(net, s, cfg, anchors, i, out))
        gts[i] = list(s.boxes)
        h = s.image_size[0]
        levels[i] = [
            difficulty_level(r.bbox[3] - r.bbox[1], r.occlusion, r.truncation, h) for r in s.labels
        ] if s.labels else [0] * len(s.boxes)
        if out.depth is not None:
            gt = s.depth.in_range(tuple(cfg.z_range))
            if gt.count:
                errors.append(np.abs(out.depth.data[gt.valid] - gt.depth[gt.valid]))
    rep = EvalReport()
    k = scenes[0].rig.intrinsics if scenes else cfg.rig.intrinsics
    iou2d = projected_iou_fn(k, tuple(cfg.image_size))
    thr = cfg.iou_threshold
    for name, fn, store in (("3d", iou_3d, rep.ap_3d), ("bev", rotated_iou_bev, rep.ap_bev), ("2d", iou2d, rep.ap_2d)):
        store["all"] = average_precision(dets, gts, fn, thr, rp)
        for lv, diff in enumerate(("easy", "moderate", "hard")):
            ignore = {i: [not (0 <= l <= lv) for l in levels[i]] for i in gts}
            store[diff] = average_precision(dets, gts, fn, thr, rp, ignore=ignore)
    if errors:
        e = np.concatenate(errors)
        rep.depth_mean, rep.depth_median = float(e.mean()), lower_median(e)
    rep.binned_ap = distance_binned_ap(dets, gts, 5.0, 40.0, rotated_iou_bev, thr, rp)
    if not any(gts.values()) and not dets:
        rep.notes.append("no ground truth and no detections: AP defined as 1")
    return rep


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    label: str
    cfg: PipelineConfig
    report: EvalReport | None = None
    seconds: float = 0.0
    error: str | None = None


def run_ablation(cfgs: Sequence[PipelineConfig], train_scenes=None, test_scenes=None) -> list[AblationRow]:
    """Train and evaluate every cell identically; failures are recorded and the rest proceed."""
    rows = []
    cache: dict = {}
    for cfg in cfgs:
        row = AblationRow(cfg.label, cfg)
        try:
            key = (cfg.synth_config(), cfg.train_seeds, cfg.test_seeds)
            if train_scenes is None or test_scenes is None:
                if key not in cache:
                    cache[key] = (make_scenes(seed_list(cfg.train_seeds), cfg), make_scenes(seed_list(cfg.test_seeds), cfg))
                tr, te = cache[key]
            else:
                tr, te = train_scenes, test_scenes
            res = train_toy(cfg, tr, log_every=0)
            row.report = evaluate(res.net, te, cfg)
            row.seconds = res.seconds
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the matrix
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'Transformation':<16}{'Supervision':<13}{'AP_3D / AP_BEV / AP_2D':<28}{'depth median (m)':>18}"]
    for r in rows:
        sup = SUPERVISION_LABELS[(r.cfg.construction_mode, r.cfg.supervision)]
        name = CONSTRUCTION_LABELS[r.cfg.construction_mode]
        if r.error:
            lines.append(f"{name:<16}{sup:<13}FAILED ({r.error})")
            continue
        rep = r.report
        aps = f"{100 * rep.ap_3d['all']:.2f} / {100 * rep.ap_bev['all']:.2f} / {100 * rep.ap_2d['all']:.2f}"
        dm = "-" if math.isnan(rep.depth_median) else f"{rep.depth_median:.3f}"
        lines.append(f"{name:<16}{sup:<13}{aps:<28}{dm:>18}")
    return "\n".join(lines)


def table3_matrix(base: PipelineConfig) -> list[PipelineConfig]:
    return [base.replace(construction_mode=c, supervision=s) for c, s in
            (("img_3dv", "none"), ("img_3dv", "occupancy"), ("cv_3dgv", "depth"), ("psv_3dgv", "none"),
             ("psv_3dgv", "depth"))]


def load_matrix(path) -> list[PipelineConfig]:
    """A matrix file is a config file whose extra sections ``[cell.NAME]`` override the base per cell."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser()
    parser.read_string(text)
    base_parser = configparser.ConfigParser()
    for sec in parser.sections():
        if not sec.startswith("cell."):
            base_parser[sec] = dict(parser[sec])
    base = PipelineConfig.from_text(_ini_text(base_parser)) if base_parser.sections() else PipelineConfig()
    cells = [sec for sec in parser.sections() if sec.startswith("cell.")]
    if not cells:
        return table3_matrix(base)
    out = []
    for sec in cells:
        over = dict(parser[sec])
        merged = configparser.ConfigParser()
        for k, v in over.items():
            section = next((s for s, keys in PipelineConfig.SECTIONS.items() if k in keys), None)
            if section is None:
                raise ContractError(f"unknown key {k!r} in [{sec}]")
            if section not in merged:
                merged[section] = {}
            merged[section][k] = v
        out.append(PipelineConfig.from_text(_ini_text(merged), base=base))
    return out


def _ini_text(parser: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
