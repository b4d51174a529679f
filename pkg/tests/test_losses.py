import math

import numpy as np
import pytest

from modules.data import Box
from modules.losses import LossConfig
from modules.losses import cycle_consistency_loss
from modules.losses import detection_total_loss
from modules.losses import encode_box
from modules.losses import flow_total_loss
from modules.losses import focal_loss
from modules.losses import huber_loss
from modules.losses import make_detection_targets
from modules.losses import nearest_neighbor_loss
from modules.model import DetectHeadConfig
from modules.numeric import grad_check
from modules.util import Failed
from modules.util import ShapeError


@pytest.fixture
def head():
    return DetectHeadConfig(bev_extent=20.0, bev_cells=64, conv_channels=8, num_classes=2)


class TestNearestNeighborLoss:
    def test_identical_clouds(self, rng):
        xyz = rng.standard_normal((30, 3))
        loss, grad, _ = nearest_neighbor_loss(xyz, xyz)
        assert loss == 0.0
        assert not np.any(grad)

    def test_by_hand(self):
        loss, _, nn_index = nearest_neighbor_loss(np.zeros((1, 3)), np.array([[1.0, 0, 0], [0.0, 2.0, 0]]))
        assert loss == 1.0
        assert nn_index[0] == 0

    def test_euclidean_variant(self):
        loss, _, _ = nearest_neighbor_loss(np.zeros((1, 3)), np.array([[0.0, 3.0, 4.0]]), distance="euclidean")
        assert loss == pytest.approx(5.0)

    def test_target_may_be_larger_than_query(self, rng):
        loss, grad, nn_index = nearest_neighbor_loss(rng.standard_normal((5, 3)), rng.standard_normal((40, 3)))
        assert grad.shape == (5, 3)
        assert nn_index.shape == (5,)
        assert loss >= 0.0

    @pytest.mark.parametrize("seed", range(1000))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        target = rng.uniform(-2, 2, (int(rng.integers(1, 30)), 3))
        propagated = rng.uniform(-2, 2, (int(rng.integers(1, 30)), 3))
        distance = ("squared", "euclidean")[seed % 2]
        loss, grad, nn_index = nearest_neighbor_loss(propagated, target, distance)
        total = 0.0
        for i, p in enumerate(propagated):
            d2 = [float(np.sum((p - q) ** 2)) for q in target]
            nearest = int(np.argmin(d2))
            assert nn_index[i] == nearest
            total += d2[nearest] if distance == "squared" else math.sqrt(d2[nearest])
        assert loss == pytest.approx(total / len(propagated), rel=1e-6, abs=1e-12)
        assert grad.shape == propagated.shape

    def test_empty_target(self):
        with pytest.raises(Failed, match="empty"):
            nearest_neighbor_loss(np.zeros((1, 3)), np.zeros((0, 3)))

    @pytest.mark.parametrize("distance", ["squared", "euclidean"])
    def test_gradient_with_fixed_assignment(self, rng, distance):
        target = rng.standard_normal((20, 3))
        propagated = rng.standard_normal((6, 3))
        _, _, nn_index = nearest_neighbor_loss(propagated, target)

        def forward(p):
            return nearest_neighbor_loss(p, target, distance, nn_index=nn_index)[0]

        def backward(dy, p):
            return {"p": dy * nearest_neighbor_loss(p, target, distance, nn_index=nn_index)[1]}

        report = grad_check(forward, backward, {"p": propagated})
        assert report.passed, list(report.lines())


class TestCycleConsistencyLoss:
    def test_perfect_reconstruction(self, rng):
        anchors = rng.standard_normal((8, 3))
        loss, grad = cycle_consistency_loss(anchors, anchors.copy())
        assert loss == 0.0
        assert not np.any(grad)

    def test_by_hand(self):
        loss, _ = cycle_consistency_loss(np.zeros((1, 3)), np.array([[0.0, 3.0, 4.0]]))
        assert loss == 25.0

    def test_euclidean_by_hand(self):
        loss, _ = cycle_consistency_loss(np.zeros((1, 3)), np.array([[0.0, 3.0, 4.0]]), distance="euclidean")
        assert loss == pytest.approx(5.0)

    @pytest.mark.parametrize("seed", range(1000))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        anchors = rng.uniform(-2, 2, (int(rng.integers(1, 30)), 3))
        reconstructed = anchors + rng.normal(0.0, 0.3, anchors.shape)
        distance = ("squared", "euclidean")[seed % 2]
        loss, _ = cycle_consistency_loss(anchors, reconstructed, distance)
        terms = [float(np.sum((a - r) ** 2)) for a, r in zip(anchors, reconstructed)]
        if distance == "euclidean":
            terms = [math.sqrt(t) for t in terms]
        assert loss == pytest.approx(sum(terms) / len(terms), rel=1e-6, abs=1e-12)
        assert loss == pytest.approx(cycle_consistency_loss(reconstructed, anchors, distance)[0], rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cycle_consistency_loss(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_gradient(self, rng):
        anchors = rng.standard_normal((7, 3))
        report = grad_check(
            lambda r: cycle_consistency_loss(anchors, r)[0],
            lambda dy, r: {"r": dy * cycle_consistency_loss(anchors, r)[1]},
            {"r": rng.standard_normal((7, 3))},
        )
        assert report.passed, list(report.lines())


class TestFlowTotalLoss:
    def test_is_sum_of_parts(self, rng):
        samples = rng.standard_normal((10, 3))
        target = rng.standard_normal((25, 3))
        propagated = samples + 0.1
        reconstructed = samples - 0.05
        report = flow_total_loss(samples, target, propagated, reconstructed)
        nn_loss, _, _ = nearest_neighbor_loss(propagated, target)
        cycle, _ = cycle_consistency_loss(samples, reconstructed)
        assert report.nn_loss == pytest.approx(nn_loss)
        assert report.cycle_loss == pytest.approx(cycle)
        assert report.total == pytest.approx(nn_loss + cycle)

    def test_rejects_mismatched_samples(self, rng):
        with pytest.raises(ShapeError):
            flow_total_loss(np.zeros((3, 3)), np.zeros((4, 3)), np.zeros((2, 3)), np.zeros((3, 3)))


class TestLossConfig:
    def test_unknown_distance(self):
        with pytest.raises(Failed, match="distance"):
            LossConfig(distance="chamfer")

    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.focal_alpha, cfg.focal_beta, cfg.huber_delta, cfg.w_hm, cfg.w_reg) == (2.0, 4.0, 1.0, 1.0, 2.0)


class TestTargets:
    def test_no_boxes(self, head):
        targets = make_detection_targets([], head)
        assert targets.heatmap_target.shape == (2, 64, 64)
        assert not np.any(targets.heatmap_target)
        assert not np.any(targets.reg_mask)

    def test_box_on_cell_center(self, head):
        box = Box((0.3125, 0.3125, -1.0), (1.6, 3.9, 1.5), 0.0, class_id=1)
        targets = make_detection_targets([box], head)
        assert targets.heatmap_target[1, 32, 32] == 1.0
        assert targets.heatmap_target[1].sum() > 1.0
        assert not np.any(targets.heatmap_target[0])
        assert targets.reg_mask.sum() == 1
        np.testing.assert_allclose(targets.reg_target[32, 32, :3], [0.0, 0.0, -1.0], atol=1e-12)

    def test_encoding_by_hand(self, head):
        box = Box((0.3125, 0.3125, 0.0), (2.0, 2.0, 1.0), math.pi / 4)
        _, _, values = encode_box(box, head)
        half = math.sqrt(2.0) / 2.0
        np.testing.assert_allclose(values[3:], [math.log(2), math.log(2), 0.0, half, half], atol=1e-12)

    def test_box_outside_extent_is_dropped(self, head):
        targets = make_detection_targets([Box((50.0, 0.0, 0.0), (1.0, 1.0, 1.0))], head)
        assert targets.dropped == 1
        assert not np.any(targets.heatmap_target)

    def test_overlap_combines_by_maximum(self, head):
        boxes = [Box((0.3125, 0.3125, 0.0), (4.0, 4.0, 1.0)), Box((1.5625, 0.3125, 0.0), (4.0, 4.0, 1.0))]
        targets = make_detection_targets(boxes, head)
        assert targets.heatmap_target.max() == 1.0
        assert targets.heatmap_target[0, 32, 32] == 1.0
        assert targets.heatmap_target[0, 34, 32] == 1.0

    def test_unknown_class(self, head):
        with pytest.raises(Failed, match="class id"):
            make_detection_targets([Box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), class_id=5)], head)


class TestFocalLoss:
    def test_single_positive_cell(self):
        loss, _ = focal_loss(np.array([[0.5]]), np.array([[1.0]]))
        assert loss == pytest.approx(0.25 * math.log(2.0), rel=1e-6)

    def test_perfect_prediction_is_near_zero(self):
        target = np.zeros((4, 4))
        target[1, 2] = 1.0
        pred = np.where(target == 1.0, 1.0 - 1e-6, 1e-6)
        loss, _ = focal_loss(pred, target)
        assert loss < 1e-8

    def test_clamped_entries_get_zero_gradient(self):
        _, grad = focal_loss(np.array([0.0, 1.0, 0.5]), np.array([0.0, 1.0, 0.0]))
        assert grad[0] == 0.0
        assert grad[1] == 0.0
        assert grad[2] != 0.0

    def test_gradient(self, rng):
        target = rng.uniform(0.0, 0.9, (3, 5))
        target[1, 1] = 1.0
        pred = rng.uniform(0.05, 0.95, (3, 5))
        report = grad_check(
            lambda p: focal_loss(p, target)[0],
            lambda dy, p: {"p": dy * focal_loss(p, target)[1]},
            {"p": pred},
        )
        assert report.passed, list(report.lines())


class TestHuberLoss:
    def test_quadratic_zone(self):
        loss, _ = huber_loss(np.array([[0.5]]), np.array([[0.0]]))
        assert loss == 0.125

    def test_linear_zone(self):
        loss, _ = huber_loss(np.array([[2.0]]), np.array([[0.0]]))
        assert loss == 1.5

    def test_empty_mask_is_zero(self):
        loss, grad = huber_loss(np.ones((2, 2, 8)), np.zeros((2, 2, 8)), mask=np.zeros((2, 2), dtype=bool))
        assert loss == 0.0
        assert not np.any(grad)

    def test_mask_selects_cells(self):
        pred = np.zeros((2, 2, 8))
        pred[1, 1] = 0.5
        pred[0, 0] = 100.0
        mask = np.zeros((2, 2), dtype=bool)
        mask[1, 1] = True
        loss, grad = huber_loss(pred, np.zeros_like(pred), mask=mask)
        assert loss == pytest.approx(0.125)
        assert not np.any(grad[0, 0])


def test_detection_total_weights():
    report = detection_total_loss(0.2, 0.1, w_hm=1.0, w_reg=2.0)
    assert report.total == pytest.approx(0.4)
