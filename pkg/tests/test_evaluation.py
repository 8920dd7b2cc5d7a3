import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stereovol.boxes import Box3D
from stereovol.camera import Intrinsics
from stereovol.depth import SparseDepthMap
from stereovol.evaluation import (
    DetectionRecord, UndefinedCorrelationError, average_precision, box_depth_precision, box_to_2d,
    convex_intersection, depth_error_stats, difficulty_level, distance_binned_ap, iou_2d, iou_3d, lower_median,
    pearson, polygon_area, recall_positions, rotated_iou_bev,
)
from stereovol.tensor import ContractError

from oracles import brute_force_ap, monte_carlo_bev_iou


def unit(x=0.0, z=0.0, theta=0.0, y=0.0, h=1.0):
    return Box3D(x, y, z, h, 1.0, 1.0, theta)


class TestRotatedIoU:
    def test_half_overlap_is_one_third(self):
        assert rotated_iou_bev(unit(), unit(x=0.5)) == pytest.approx(1 / 3, abs=1e-12)

    def test_identity_and_disjoint(self):
        b = Box3D(1, 0, 10, 1.5, 1.6, 3.9, 0.7)
        assert rotated_iou_bev(b, b) == pytest.approx(1.0, abs=1e-12)
        assert rotated_iou_bev(b, Box3D(20, 0, 10, 1.5, 1.6, 3.9, 0.7)) == 0.0

    def test_yaw_symmetry_of_square(self):
        assert rotated_iou_bev(unit(theta=0.0), unit(theta=math.pi / 2)) == pytest.approx(1.0, abs=1e-12)

    def test_rotated_square_in_square(self):
        # a 45 degree square of side 1 against an axis-aligned one: intersection is a regular octagon
        inter = 2 * (math.sqrt(2) - 1)
        assert rotated_iou_bev(unit(), unit(theta=math.pi / 4)) == pytest.approx(inter / (2 - inter), abs=1e-12)

    def test_degenerate(self):
        assert rotated_iou_bev(Box3D(0, 0, 0, 1, 0, 1, 0), unit()) == 0.0

    def test_monte_carlo(self):
        rng = np.random.default_rng(0)
        for i in range(200):
            a = Box3D(rng.uniform(-1, 1), 0, rng.uniform(-1, 1), 1.5, rng.uniform(0.5, 2), rng.uniform(0.5, 4),
                      rng.uniform(0, 2 * math.pi))
            b = Box3D(rng.uniform(-1, 1), 0, rng.uniform(-1, 1), 1.5, rng.uniform(0.5, 2), rng.uniform(0.5, 4),
                      rng.uniform(0, 2 * math.pi))
            assert abs(rotated_iou_bev(a, b) - monte_carlo_bev_iou(a.as_array(), b.as_array(), seed=i)) < 0.01

    def test_polygon_helpers(self):
        sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
        assert polygon_area(sq) == 1.0
        assert polygon_area(sq[:2]) == 0.0
        assert polygon_area(convex_intersection(sq, sq + 2)) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi))
def test_iou_symmetric_and_bounded(dx, dz, t1, t2):
    a = Box3D(0, 0, 10, 1.5, 1.6, 3.9, t1)
    b = Box3D(dx, 0, 10 + dz, 1.5, 1.7, 3.5, t2)
    ab, ba = rotated_iou_bev(a, b), rotated_iou_bev(b, a)
    assert 0.0 <= ab <= 1.0
    assert ab == pytest.approx(ba, abs=1e-9)


class TestIoU3D:
    def test_half_height(self):
        assert iou_3d(unit(), unit(y=0.5)) == pytest.approx(1 / 3, abs=1e-12)

    def test_product_form(self):
        assert iou_3d(unit(), unit(x=0.5, y=0.5)) == pytest.approx(0.25 / 1.75, abs=1e-12)

    def test_separated_heights(self):
        assert iou_3d(unit(), unit(y=2.0)) == 0.0

    def test_at_most_bev(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = Box3D(rng.uniform(-1, 1), rng.uniform(-0.3, 0.3), 10, 1.5, 1.6, 3.9, rng.uniform(0, 6))
            b = Box3D(rng.uniform(-1, 1), rng.uniform(-0.3, 0.3), 10, 1.5, 1.6, 3.9, rng.uniform(0, 6))
            assert iou_3d(a, b) <= rotated_iou_bev(a, b) + 1e-12


class Test2D:
    def test_iou_2d(self):
        assert iou_2d(np.array([0, 0, 2, 2]), np.array([1, 0, 3, 2])) == pytest.approx(1 / 3)
        assert iou_2d(np.array([0, 0, 1, 1]), np.array([2, 2, 3, 3])) == 0.0

    def test_box_to_2d_centre(self):
        k = Intrinsics(100.0, 100.0, 50.0, 40.0)
        r = box_to_2d(Box3D(0, 0, 10, 1, 1, 1, 0), k)
        assert (r[0] + r[2]) / 2 == pytest.approx(50.0)
        assert (r[1] + r[3]) / 2 == pytest.approx(40.0)
        clipped = box_to_2d(Box3D(0, 0, 1, 1, 1, 1, 0), k, (80, 100))
        assert clipped[0] >= 0 and clipped[2] <= 99


def random_ap_instance(rng):
    n_img = int(rng.integers(1, 4))
    gts = {}
    for img in range(n_img):
        gts[img] = [Box3D(rng.uniform(-10, 10), 0, rng.uniform(5, 30), 1.5, 1.6, 3.9, rng.uniform(0, 6))
                    for _ in range(int(rng.integers(0, 5)))]
    dets = []
    for _ in range(int(rng.integers(0, 31))):
        img = int(rng.integers(0, n_img))
        if gts[img] and rng.random() < 0.6:
            g = gts[img][int(rng.integers(0, len(gts[img])))]
            box = Box3D(g.x + rng.normal(scale=0.5), 0, g.z + rng.normal(scale=0.5), 1.5, 1.6, 3.9,
                        g.theta + rng.normal(scale=0.2))
        else:
            box = Box3D(rng.uniform(-10, 10), 0, rng.uniform(5, 30), 1.5, 1.6, 3.9, rng.uniform(0, 6))
        # coarse scores so that ties occur
        dets.append(DetectionRecord(box, float(rng.integers(0, 8)) / 8, image_id=img))
    return dets, gts


class TestAveragePrecision:
    def test_recall_positions(self):
        np.testing.assert_allclose(recall_positions(11), np.arange(11) / 10)
        np.testing.assert_allclose(recall_positions(40), np.arange(1, 41) / 40)
        with pytest.raises(ValueError):
            recall_positions(20)

    def test_perfect(self):
        g = [Box3D(float(4 * i), 0, 10, 1.5, 1.6, 3.9, 0) for i in range(3)]
        dets = [DetectionRecord(b, 0.9) for b in g]
        assert average_precision(dets, g, recall_points=40) == 1.0
        assert average_precision(dets, g, recall_points=11) == 1.0

    def test_empty_conventions(self):
        assert average_precision([], []) == 1.0
        assert average_precision([DetectionRecord(unit(), 0.5)], []) == 0.0
        assert average_precision([], [unit()]) == 0.0

    def test_half_recall(self):
        g = [Box3D(0, 0, 10, 1.5, 1.6, 3.9, 0), Box3D(10, 0, 10, 1.5, 1.6, 3.9, 0)]
        assert average_precision([DetectionRecord(g[0], 1.0)], g, recall_points=40) == pytest.approx(0.5)
        assert average_precision([DetectionRecord(g[0], 1.0)], g, recall_points=11) == pytest.approx(6 / 11)

    def test_duplicate_is_false_positive(self):
        g = [Box3D(0, 0, 10, 1.5, 1.6, 3.9, 0)]
        dets = [DetectionRecord(g[0], 0.9), DetectionRecord(g[0], 0.8)]
        assert average_precision(dets, g) == 1.0
        assert average_precision([DetectionRecord(g[0], 0.7), DetectionRecord(unit(x=30), 0.9)], g) == 0.5

    @pytest.mark.parametrize("recall_points", [11, 40])
    def test_brute_force_oracle(self, recall_points):
        rng = np.random.default_rng(recall_points)
        for _ in range(50):
            dets, gts = random_ap_instance(rng)
            got = average_precision(dets, gts, rotated_iou_bev, 0.5, recall_points)
            want = brute_force_ap([(d.score, d.image_id, d.box) for d in dets], gts, rotated_iou_bev, 0.5,
                                  recall_points)
            assert got == want

    def test_score_order_invariance(self):
        dets, gts = random_ap_instance(np.random.default_rng(5))
        perm = np.random.default_rng(6).permutation(len(dets))
        shuffled = [dets[i] for i in perm]
        # only strict score orders are permutation invariant; ties break by list order
        for i, d in enumerate(dets):
            d.score += 1e-6 * i
        assert average_precision(dets, gts, iou_thresh=0.5) == average_precision(shuffled, gts, iou_thresh=0.5)

    def test_ignored_gt_drops_detection(self):
        g = [Box3D(0, 0, 10, 1.5, 1.6, 3.9, 0), Box3D(10, 0, 10, 1.5, 1.6, 3.9, 0)]
        dets = [DetectionRecord(g[1], 0.9), DetectionRecord(g[0], 0.5)]
        assert average_precision(dets, g, ignore={0: [False, True]}) == 1.0

    def test_nonfinite_score(self):
        with pytest.raises(ContractError):
            DetectionRecord(unit(), float("nan"))


class TestBinnedAP:
    def test_bins(self):
        g = [Box3D(0, 0, 7.0, 1.5, 1.6, 3.9, 0), Box3D(0, 0, 22.0, 1.5, 1.6, 3.9, 0)]
        res = distance_binned_ap([DetectionRecord(g[0], 0.9)], g, bin_width=5.0, range_max=40.0)
        assert len(res) == 8
        assert res[1] == 1.0 and res[4] == 0.0
        assert res[0] is None and res[7] is None

    def test_closed_last_bin(self):
        g = [Box3D(0, 0, 40.0, 1.5, 1.6, 3.9, 0)]
        assert distance_binned_ap([DetectionRecord(g[0], 0.9)], g)[-1] == 1.0


class TestDepthStats:
    def test_lower_median(self):
        assert lower_median(np.array([4.0, 1.0, 3.0, 2.0])) == 2.0
        assert lower_median(np.array([5.0])) == 5.0

    def test_stats_oracle(self):
        rng = np.random.default_rng(0)
        valid = rng.random((5, 6)) < 0.5
        gt = SparseDepthMap(np.where(valid, rng.uniform(2, 40, (5, 6)), 0.0), valid)
        pred = rng.uniform(2, 40, (5, 6))
        errs = sorted(abs(pred[i, j] - gt.depth[i, j]) for i in range(5) for j in range(6) if valid[i, j])
        mean, median = depth_error_stats(pred, gt)
        assert mean == pytest.approx(sum(errs) / len(errs), abs=1e-12)
        assert median == errs[(len(errs) - 1) // 2]

    def test_range_and_empty(self):
        gt = SparseDepthMap(np.array([[3.0, 60.0]]), np.array([[True, True]]))
        assert depth_error_stats(np.array([[3.5, 0.0]]), gt, (2.0, 40.4)) == (0.5, 0.5)
        with pytest.raises(ContractError):
            depth_error_stats(np.zeros((1, 2)), SparseDepthMap(np.zeros((1, 2)), np.zeros((1, 2), bool)))

    def test_box_precision(self):
        gt = SparseDepthMap(np.full((2, 2), 10.0), np.ones((2, 2), bool))
        pred = np.array([[10.05, 10.2], [11.0, 10.0]])
        mask = np.array([[True, True], [True, False]])
        assert box_depth_precision(pred, gt, mask, 0.1) == pytest.approx(1 / 3)
        assert box_depth_precision(pred, gt, mask, 2.0) == 1.0
        with pytest.raises(ContractError):
            box_depth_precision(pred, gt, np.zeros((2, 2), bool), 0.1)


class TestPearson:
    def test_perfect(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_oracle(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=20), rng.normal(size=20)
        assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)

    def test_constant(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson([1, 1, 1], [1, 2, 3])
        with pytest.raises(ContractError):
            pearson([1.0], [2.0])


class TestDifficulty:
    def test_levels(self):
        assert difficulty_level(50, 0, 0.0) == 0
        assert difficulty_level(30, 0, 0.0) == 1
        assert difficulty_level(30, 2, 0.4) == 2
        assert difficulty_level(20, 0, 0.0) == -1
        assert difficulty_level(30, 3, 0.0) == -1

    def test_height_scales(self):
        assert difficulty_level(40 * 32 / 375, 0, 0.0, image_height=32) == 0
