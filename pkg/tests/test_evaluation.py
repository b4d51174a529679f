import csv
import math

import numpy as np
import pytest

from modules.data import Box
from modules.evaluation import EvalReport
from modules.evaluation import average_precision
from modules.evaluation import bev_iou
from modules.evaluation import box3d_iou
from modules.evaluation import decode_detections
from modules.evaluation import distance_binned_ap
from modules.evaluation import epe
from modules.evaluation import epe_split
from modules.evaluation import flow_at_samples
from modules.evaluation import interpolated_precision
from modules.evaluation import match_detections
from modules.evaluation import nms
from modules.evaluation import polygon_area
from modules.evaluation import write_pr_curve_csv
from modules.losses import make_detection_targets
from modules.model import DetectHeadConfig
from modules.util import ShapeError


def unit(x=0.0, y=0.0, score=1.0, class_id=0, yaw=0.0):
    return Box((x, y, 0.0), (1.0, 1.0, 1.0), yaw, class_id, score)


def inside(box, xy):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rel = xy - np.array(box.center[:2])
    along = rel[:, 0] * c + rel[:, 1] * s
    across = -rel[:, 0] * s + rel[:, 1] * c
    return (np.abs(along) <= box.size[1] / 2) & (np.abs(across) <= box.size[0] / 2)


def reference_ap(scored, n_gt, n_recall=40):
    """AP_R40 from (score, is_tp) pairs by sweeping every score threshold"""
    total = 0.0
    for level in np.arange(1, n_recall + 1) / n_recall:
        best = 0.0
        for threshold, _ in scored:
            kept = [tp for s, tp in scored if s >= threshold]
            tp = sum(kept)
            if tp / n_gt >= level:
                best = max(best, tp / len(kept))
        total += best
    return total / n_recall


class TestEpe:
    def test_zero_error(self, rng):
        flow = rng.standard_normal((10, 3))
        assert epe(flow, flow) == 0.0

    def test_by_hand(self):
        assert epe(np.zeros((1, 3)), np.array([[0.0, 3.0, 4.0]])) == 5.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            epe(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_split(self):
        gt = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        pred = np.array([[0.0, 0.5, 0.0], [1.0, 0.0, 0.0]])
        result = epe_split(pred, gt)
        assert result["epe"] == pytest.approx(0.25)
        assert result["epe_static"] == pytest.approx(0.5)
        assert result["epe_dynamic"] == 0.0
        assert result["epe_zero_flow"] == pytest.approx(0.5)

    def test_split_without_movers(self):
        assert math.isnan(epe_split(np.zeros((3, 3)), np.zeros((3, 3)))["epe_dynamic"])

    def test_flow_at_samples_takes_nearest(self):
        frame = np.array([[0.0, 0, 0], [10.0, 0, 0]])
        gt_flow = np.array([[1.0, 0, 0], [0.0, 2.0, 0]])
        np.testing.assert_array_equal(flow_at_samples(frame, gt_flow, np.array([[9.0, 0, 0]])), [[0.0, 2.0, 0]])


class TestIou:
    def test_identical(self):
        box = Box((3.0, -1.0, 0.5), (1.6, 3.9, 1.5), 0.8)
        assert bev_iou(box, box) == pytest.approx(1.0)
        assert box3d_iou(box, box) == pytest.approx(1.0)

    def test_half_offset_unit_squares(self):
        assert bev_iou(unit(), unit(0.5)) == pytest.approx(1.0 / 3.0)

    def test_disjoint(self):
        assert bev_iou(unit(), unit(5.0)) == 0.0

    def test_symmetric(self):
        a = Box((0.0, 0.0, 0.0), (1.5, 4.0, 1.5), 0.3)
        b = Box((0.5, 0.4, 0.0), (1.8, 3.5, 1.5), -0.6)
        assert bev_iou(a, b) == pytest.approx(bev_iou(b, a))

    def test_rotation_by_quarter_turn_of_square(self):
        assert bev_iou(unit(), unit(yaw=math.pi / 2)) == pytest.approx(1.0)

    def test_vertical_offset_only_affects_3d(self):
        a = Box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        b = Box((0.0, 0.0, 0.5), (1.0, 1.0, 1.0))
        assert bev_iou(a, b) == pytest.approx(1.0)
        assert box3d_iou(a, b) == pytest.approx(1.0 / 3.0)

    @pytest.mark.parametrize("seed", range(1000))
    def test_area_sampling_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = Box((0.0, 0.0, 0.0), (rng.uniform(1, 2), rng.uniform(2, 4), 1.0), rng.uniform(-math.pi, math.pi))
        b = Box((*rng.uniform(-1, 1, 2), 0.0), (rng.uniform(1, 2), rng.uniform(2, 4), 1.0), rng.uniform(-math.pi, math.pi))
        # cell-centred lattice over a square holding both boxes
        ticks = (np.arange(500) + 0.5) / 500 * 7.0 - 3.5
        xy = np.stack(np.meshgrid(ticks, ticks), axis=-1).reshape(-1, 2)
        in_a, in_b = inside(a, xy), inside(b, xy)
        estimate = np.sum(in_a & in_b) / np.sum(in_a | in_b)
        assert bev_iou(a, b) == pytest.approx(estimate, abs=0.01)

    def test_polygon_area(self):
        assert polygon_area(np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 3.0], [0.0, 3.0]])) == 6.0
        assert polygon_area(np.zeros((2, 2))) == 0.0


class TestNms:
    def test_suppresses_lower_score(self):
        kept = nms([unit(score=0.8), unit(score=0.9)], 0.5)
        assert [b.score for b in kept] == [0.9]

    def test_low_overlap_survives(self):
        assert len(nms([unit(score=0.9), unit(0.5, score=0.8)], 0.5)) == 2

    def test_classes_are_independent(self):
        assert len(nms([unit(score=0.9), unit(score=0.8, class_id=1)], 0.5)) == 2

    def test_empty(self):
        assert nms([], 0.5) == []


class TestAveragePrecision:
    def test_perfect_detections(self):
        gts = [[unit(0.0), unit(5.0)]]
        dets = [[unit(0.0, score=0.9), unit(5.0, score=0.8)]]
        result = average_precision(dets, gts, iou=0.7)
        assert result.ap == pytest.approx(1.0)
        assert result.counts == {"tp": 2, "fp": 0, "fn": 0}

    def test_miss_ranked_first(self):
        gts = [[unit()]]
        dets = [[unit(0.6, score=0.9), unit(score=0.8)]]
        result = average_precision(dets, gts, iou=0.7)
        assert result.ap == pytest.approx(0.5)

    def test_no_ground_truth_is_undefined(self):
        result = average_precision([[unit()]], [[]])
        assert math.isnan(result.ap)
        assert result.undefined

    def test_no_detections(self):
        result = average_precision([[]], [[unit()]])
        assert result.ap == 0.0
        assert result.counts["fn"] == 1

    def test_duplicate_detection_is_false_positive(self):
        outcome = match_detections([[unit(score=0.9), unit(score=0.8)]], [[unit()]])
        assert outcome == [(0.9, True), (0.8, False)]

    def test_highest_iou_gt_wins(self):
        gts = [[unit(0.3), unit(0.05)]]
        dets = [[unit(score=0.9), unit(0.55, score=0.5)]]
        outcome = match_detections(dets, gts, iou=0.5)
        assert outcome == [(0.9, True), (0.5, True)]

    def test_frames_do_not_share_ground_truth(self):
        result = average_precision([[unit()], []], [[], [unit()]])
        assert result.ap == 0.0

    def test_score_threshold_only_moves_counts(self):
        gts = [[unit(0.0), unit(5.0)]]
        dets = [[unit(0.0, score=0.9), unit(5.0, score=0.2)]]
        result = average_precision(dets, gts, score_threshold=0.5)
        assert result.counts == {"tp": 1, "fp": 0, "fn": 1}
        assert result.ap == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", range(1000))
    def test_matches_threshold_sweep(self, seed):
        rng = np.random.default_rng(seed)
        n_gt = int(rng.integers(1, 6))
        gts = [unit(10.0 * i) for i in range(n_gt)]
        dets = []
        for score in rng.permutation(np.linspace(0.05, 0.95, 7)):
            target = int(rng.integers(0, n_gt + 2))
            dets.append(unit(10.0 * target, score=float(score)))
        matched = set()
        scored = []
        for det in sorted(dets, key=lambda d: -d.score):
            slot = int(round(det.center[0] / 10.0))
            hit = slot < n_gt and slot not in matched
            matched.add(slot)
            scored.append((det.score, hit))
        result = average_precision([dets], [gts])
        assert result.ap == pytest.approx(reference_ap(scored, n_gt))

    def test_interpolation_levels(self):
        levels, values = interpolated_precision([0.5, 1.0], [1.0, 0.5], n_recall=4)
        np.testing.assert_allclose(levels, [0.25, 0.5, 0.75, 1.0])
        np.testing.assert_allclose(values, [1.0, 1.0, 0.5, 0.5])

    def test_frame_count_mismatch(self):
        with pytest.raises(ShapeError):
            average_precision([[]], [[], []])

    def test_distance_bins(self):
        gts = [[unit(5.0), unit(15.0)]]
        dets = [[unit(5.0, score=0.9)]]
        bins = distance_binned_ap(dets, gts, iou=0.7)
        assert bins["near"] == pytest.approx(1.0)
        assert bins["mid"] == 0.0
        assert math.isnan(bins["far"])


class TestDecode:
    @pytest.fixture
    def head(self):
        return DetectHeadConfig(bev_extent=20.0, bev_cells=64, conv_channels=8)

    def test_all_zero_heatmap(self, head):
        assert decode_detections(np.zeros((1, 64, 64)), np.zeros((64, 64, 8)), head) == []

    def test_round_trip_through_targets(self, head):
        boxes = [Box((5.1, -3.3, -1.0), (1.6, 3.9, 1.5), 0.7), Box((-12.0, 8.4, -0.8), (1.8, 4.4, 1.6), -2.0)]
        targets = make_detection_targets(boxes, head)
        decoded = decode_detections(targets.heatmap_target, targets.reg_target, head, peak_threshold=0.99)
        assert len(decoded) == 2
        for box in boxes:
            match = min(decoded, key=lambda d: math.dist(d.center, box.center))
            np.testing.assert_allclose(match.center, box.center, atol=1e-9)
            np.testing.assert_allclose(match.size, box.size, rtol=1e-9)
            assert match.yaw == pytest.approx(box.yaw)
            assert match.score == 1.0
            assert bev_iou(match, box) == pytest.approx(1.0)

    def test_flat_peak_resolves_to_lower_index(self, head):
        heatmap = np.zeros((1, 64, 64))
        heatmap[0, 2, 2] = heatmap[0, 2, 3] = 0.8
        decoded = decode_detections(heatmap, np.zeros((64, 64, 8)), head)
        assert len(decoded) == 1
        assert decoded[0].center[1] == pytest.approx(-20.0 + 2.5 * head.cell_size)

    def test_max_dets_keeps_best(self, head):
        heatmap = np.zeros((1, 64, 64))
        heatmap[0, 10, 10] = 0.5
        heatmap[0, 30, 30] = 0.9
        decoded = decode_detections(heatmap, np.zeros((64, 64, 8)), head, max_dets=1)
        assert [d.score for d in decoded] == [0.9]


class TestReport:
    def test_pr_curve_csv(self, tmp_path):
        path = tmp_path / "pr_curve.csv"
        write_pr_curve_csv([(0.5, 1.0), (1.0, 0.5)], str(path))
        with open(path, newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows == [["recall", "precision"], ["0.500000", "1.000000"], ["1.000000", "0.500000"]]

    def test_lines_cover_sections(self):
        report = EvalReport()
        report.flow = {"epe": 0.1}
        report.ap = {0: 0.5}
        lines = list(report.lines())
        assert lines[0] == "Scene flow"
        assert "Detection (BEV AP_R40)" in lines
