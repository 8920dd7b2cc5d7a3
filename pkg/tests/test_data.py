import math

import numpy as np
import pytest

from stereovol.boxes import Box3D
from stereovol.camera import Intrinsics, StereoRig
from stereovol.data import (
    Calibration, GenerationError, LabelRecord, ParseError, SynthConfig, _make_texture, _pixel_grid, depth_to_points,
    format_calib, format_detections, format_labels, gt_boxes, horizontal_flip, lidar_to_sparse_depth, load_scene,
    parse_calib, parse_labels, parse_seed_range, render_view, save_scene, synth_scene, toy_grid,
)
from stereovol.evaluation import DetectionRecord, average_precision, rotated_iou_bev

KITTI_CALIB = """P0: 721.5377 0 609.5593 0 0 721.5377 172.854 0 0 0 1 0
P1: 721.5377 0 609.5593 -387.5744 0 721.5377 172.854 0 0 0 1 0
P2: 721.5377 0 609.5593 44.85728 0 721.5377 172.854 0.2163791 0 0 1 0.002745884
P3: 721.5377 0 609.5593 -339.5242 0 721.5377 172.854 2.199936 0 0 1 0.002729905
R0_rect: 0.9999239 0.00983776 -0.007445048 -0.009869795 0.9999421 -0.004278459 0.007402527 0.004351614 0.9999631
"""

LABEL_LINE = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59"


class TestCalibration:
    def test_parse_kitti(self):
        c = parse_calib(KITTI_CALIB)
        rig = c.rig
        assert rig.fx == pytest.approx(721.5377)
        assert rig.baseline == pytest.approx((44.85728 + 339.5242) / 721.5377)
        assert c.extra["R0_rect"].size == 9

    def test_round_trip(self):
        c = parse_calib(KITTI_CALIB)
        back = parse_calib(format_calib(c))
        np.testing.assert_array_equal(back.P2, c.P2)
        np.testing.assert_array_equal(back.P3, c.P3)

    def test_from_rig(self):
        rig = StereoRig(Intrinsics(48.0, 48.0, 47.5, 9.5), 1.2)
        back = parse_calib(format_calib(Calibration.from_rig(rig))).rig
        assert back.baseline == pytest.approx(1.2)
        assert back.intrinsics.cu == 47.5

    @pytest.mark.parametrize("text", [
        "P2: 1 2 3\nP3: " + " ".join(["0"] * 12),
        "P3: " + " ".join(["0"] * 12),
        "P2 1 2 3",
        "P2: a b c",
    ])
    def test_errors(self, text):
        with pytest.raises(ParseError):
            parse_calib(text)


class TestLabels:
    def test_parse(self):
        (r,) = parse_labels(LABEL_LINE)
        assert r.cls == "Car" and r.occlusion == 0
        assert r.dims == (1.65, 1.67, 3.64)
        b = r.to_box()
        assert b.y == pytest.approx(1.71 - 1.65 / 2)
        assert b.l == 3.64 and b.w == 1.67

    def test_round_trip_with_score(self):
        text = LABEL_LINE + " 0.75\nDontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n"
        recs = parse_labels(text)
        assert recs[0].score == 0.75
        assert parse_labels(format_labels(recs)) == recs

    def test_dontcare_dropped(self):
        recs = parse_labels(LABEL_LINE + "\nDontCare -1 -1 -10 0 0 1 1 -1 -1 -1 -1000 -1000 -1000 -10")
        assert len(gt_boxes(recs, ("Car", "DontCare"))) == 1

    def test_from_box(self):
        b = Box3D(1.0, 0.8, 10.0, 1.5, 1.6, 3.9, 0.3)
        r = LabelRecord.from_box(b)
        assert r.to_box().y == pytest.approx(b.y)
        assert r.alpha == pytest.approx(0.3 - math.atan2(1.0, 10.0))

    @pytest.mark.parametrize("text", ["Car 0 0", "Car x 0 0 0 0 0 0 0 0 0 0 0 0 0"])
    def test_errors(self, text):
        with pytest.raises(ParseError):
            parse_labels(text)

    def test_detections_format(self):
        line = format_detections([DetectionRecord(Box3D(1, 2, 3, 4, 5, 6, 0.5), 0.25)])
        assert line.split() == ["Car", "0.25", "1.0", "2.0", "3.0", "4.0", "5.0", "6.0", "0.5"]

    def test_seed_range(self):
        assert parse_seed_range("3..5") == [3, 4, 5]
        assert parse_seed_range("1,7") == [1, 7]


class TestLidar:
    k = Intrinsics(10.0, 10.0, 2.0, 2.0)

    def test_zbuffer_keeps_nearest(self):
        pts = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 3.0], [0.0, 0.0, -1.0], [100.0, 0.0, 1.0]])
        d = lidar_to_sparse_depth(pts, self.k, (5, 5))
        assert d.count == 1
        assert d.depth[2, 2] == 3.0

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        u, v = rng.integers(0, 5, 30), rng.integers(0, 5, 30)
        z = rng.uniform(2, 10, 30)
        pts = np.stack([(u - 2.0) * z / 10, (v - 2.0) * z / 10, z], -1)
        d = lidar_to_sparse_depth(pts, self.k, (5, 5))
        back = lidar_to_sparse_depth(depth_to_points(d, self.k), self.k, (5, 5))
        np.testing.assert_allclose(back.depth, d.depth, atol=1e-12)
        np.testing.assert_array_equal(back.valid, d.valid)


class TestSynth:
    def test_deterministic(self):
        a, b = synth_scene(3), synth_scene(3)
        np.testing.assert_array_equal(a.left, b.left)
        np.testing.assert_array_equal(a.depth.depth, b.depth.depth)
        assert a.boxes == b.boxes
        assert not np.array_equal(a.left, synth_scene(4).left)

    def test_shapes(self):
        s = synth_scene(0)
        assert s.left.shape == (4, 32, 96)
        assert s.right.shape == s.left.shape
        assert 1 <= len(s.boxes) <= 2
        assert 0.2 < s.depth.valid.mean() < 0.4

    def test_zero_boxes(self):
        s = synth_scene(1, SynthConfig(n_boxes=(0, 0)))
        assert s.boxes == [] and s.labels == []
        np.testing.assert_array_equal(s.left[-1], 0.0)

    def test_boxes_inside_grid(self):
        g = toy_grid()
        for seed in range(20):
            for b in synth_scene(seed).boxes:
                assert g.x_range[0] < b.x < g.x_range[1]
                assert g.z_range[0] < b.z < g.z_range[1]
                assert b.y + b.h / 2 == pytest.approx(1.65)

    def test_disparity_oracle(self):
        """The right view at u - fx*b/z sees the same surface point as the left view at u."""
        cfg = SynthConfig()
        seed = 5
        s = synth_scene(seed, cfg)
        tex = _make_texture(np.random.default_rng(seed), cfg)
        boxes = np.array([b.as_array() for b in s.boxes])
        k = cfg.rig.intrinsics
        u, v = _pixel_grid(cfg.image_size)
        _, z, _ = render_view(boxes, tex, k, 0.0, u, v, cfg.ground_y)
        hit = np.isfinite(z)
        ur = u[hit] - k.fx * cfg.rig.baseline / z[hit]
        feats_r, zr, _ = render_view(boxes, tex, k, cfg.rig.baseline, ur, v[hit], cfg.ground_y)
        # ignore pixels whose right-view ray is occluded by a different surface
        same = np.abs(zr - z[hit]) < 1e-9
        assert same.mean() > 0.8
        np.testing.assert_allclose(feats_r[:, same], s.left[:, hit][:, same], atol=1e-9)

    def test_generation_error(self):
        with pytest.raises(GenerationError):
            synth_scene(0, SynthConfig(n_boxes=(30, 30), max_tries=5))


class TestFlip:
    def test_involution(self):
        s = synth_scene(7)
        back = horizontal_flip(horizontal_flip(s))
        np.testing.assert_array_equal(back.left, s.left)
        np.testing.assert_array_equal(back.right, s.right)
        np.testing.assert_array_equal(back.depth.depth, s.depth.depth)
        for a, b in zip(back.boxes, s.boxes):
            np.testing.assert_allclose(a.as_array(), b.as_array(), atol=1e-12)

    def test_box_rules(self):
        s = synth_scene(8)
        f = horizontal_flip(s)
        for a, b in zip(s.boxes, f.boxes):
            assert b.x == pytest.approx(s.rig.baseline - a.x)
            assert b.z == a.z
            assert math.cos(b.theta) == pytest.approx(-math.cos(a.theta))
            assert math.sin(b.theta) == pytest.approx(math.sin(a.theta))

    def test_flipped_scene_is_consistent_render(self):
        """Mirroring must look like a real rectified rig viewing the mirrored boxes."""
        cfg = SynthConfig()
        seed = 9
        s = synth_scene(seed, cfg)
        f = horizontal_flip(s)
        boxes = np.array([b.as_array() for b in f.boxes])
        u, v = _pixel_grid(cfg.image_size)
        _, z, ids = render_view(boxes, _make_texture(np.random.default_rng(seed), cfg), f.rig.intrinsics, 0.0, u, v,
                                cfg.ground_y)
        np.testing.assert_array_equal(f.left[-1] > 0, ids >= 0)
        np.testing.assert_allclose(f.depth.depth[f.depth.valid], z[f.depth.valid], atol=1e-9)

    def test_ap_invariant_under_flip(self):
        s = synth_scene(11)
        dets = [DetectionRecord(Box3D(b.x + 0.2, b.y, b.z - 0.1, b.h, b.w, b.l, b.theta + 0.05), 0.9) for b in s.boxes]
        f = horizontal_flip(s)
        fdets = [DetectionRecord(horizontal_flip(_only(s, d.box)).boxes[0], d.score) for d in dets]
        assert average_precision(dets, s.boxes, rotated_iou_bev, 0.5) == pytest.approx(
            average_precision(fdets, f.boxes, rotated_iou_bev, 0.5), abs=1e-12)


def _only(s, box):
    from dataclasses import replace
    return replace(s, boxes=[box], labels=[])


def test_save_load(tmp_path):
    s = synth_scene(2)
    d = save_scene(s, tmp_path)
    back = load_scene(d, s.grid)
    np.testing.assert_array_equal(back.left, s.left)
    np.testing.assert_array_equal(back.depth.valid, s.depth.valid)
    assert back.seed == 2
    assert back.rig.baseline == pytest.approx(s.rig.baseline)
    for a, b in zip(back.boxes, s.boxes):
        np.testing.assert_allclose(a.as_array(), b.as_array(), atol=1e-12)
