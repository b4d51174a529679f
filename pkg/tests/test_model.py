import math

import numpy as np
import pytest

from modules.core.grad_suite import tiny_model_config
from modules.core.grad_suite import tiny_scene
from modules.model import HEATMAP_PRIOR
from modules.model import BackboneConfig
from modules.model import FlowHeadConfig
from modules.model import backbone_forward
from modules.model import detect_head_forward
from modules.model import detection_loss_and_grad
from modules.model import flow_loss_and_grad
from modules.model import init_model_params
from modules.model import plan_sampling
from modules.model import predict_flow
from modules.model import reinit_namespace
from modules.pointops import PointCloud
from modules.util import Failed


@pytest.fixture
def cfg():
    return tiny_model_config()


@pytest.fixture
def params(cfg):
    return init_model_params(cfg, seed=3, dtype=np.float64)


class TestInit:
    def test_same_seed_same_parameters(self, cfg):
        a = init_model_params(cfg, seed=11, dtype=np.float64)
        b = init_model_params(cfg, seed=11, dtype=np.float64)
        assert a.digest() == b.digest()

    def test_reinit_touches_one_namespace(self, cfg, params):
        g_before = params.digest(["g"])
        s_before = params.digest(["s"])
        fresh = init_model_params(cfg, seed=99, dtype=np.float64)
        reinit_namespace(params, cfg, "h", seed=99)
        assert params.digest(["g"]) == g_before
        assert params.digest(["s"]) == s_before
        assert params.digest(["h"]) == fresh.digest(["h"])

    def test_namespaces_have_independent_streams(self, cfg):
        a = init_model_params(cfg, seed=5)
        b = init_model_params(cfg, seed=5)
        reinit_namespace(b, cfg, "s", seed=6)
        assert a.digest(["g"]) == b.digest(["g"])
        assert a.digest(["h"]) == b.digest(["h"])

    def test_heatmap_bias_prior(self, params):
        np.testing.assert_allclose(params.value("h.hm.0.b"), HEATMAP_PRIOR)


class TestConfigValidation:
    def test_centroids_cannot_exceed_samples(self):
        with pytest.raises(Failed, match="n_centroids"):
            BackboneConfig(n_sample=8, n_centroids=16)

    def test_flow_head_must_end_in_three_channels(self):
        with pytest.raises(Failed, match="width 3"):
            FlowHeadConfig(fc=(8, 4))

    def test_unknown_neighbor_search(self):
        with pytest.raises(Failed, match="neighbor_search"):
            BackboneConfig(neighbor_search="kdtree")


class TestBackbone:
    def test_deterministic(self, cfg, params):
        cloud, _, _ = tiny_scene(0)
        a = backbone_forward(cloud, cfg.backbone, params, seed=4)
        b = backbone_forward(cloud, cfg.backbone, params, seed=4)
        np.testing.assert_array_equal(a.sampled_feats, b.sampled_feats)
        np.testing.assert_array_equal(a.centroid_feats, b.centroid_feats)

    def test_layout(self, cfg, params):
        cloud, _, _ = tiny_scene(0)
        encoding = backbone_forward(cloud, cfg.backbone, params)
        assert encoding.layout == (cfg.backbone.n_sample, cfg.backbone.n_centroids, 8, 8)

    def test_translation_invariant_features(self, cfg, params):
        cloud, _, _ = tiny_scene(1)
        moved = cloud.translated([3.0, -2.0, 0.5])
        a = backbone_forward(cloud, cfg.backbone, params, seed=2)
        b = backbone_forward(moved, cfg.backbone, params, seed=2)
        np.testing.assert_allclose(b.sampled_feats, a.sampled_feats, atol=1e-9)
        np.testing.assert_allclose(b.sampled_xyz, a.sampled_xyz + [3.0, -2.0, 0.5], atol=1e-12)

    def test_grid_search_matches_brute(self, params):
        cfg = tiny_model_config()
        cloud, _, _ = tiny_scene(2)
        brute = backbone_forward(cloud, cfg.backbone, params, seed=1)
        cfg.backbone.neighbor_search = "grid"
        grid = backbone_forward(cloud, cfg.backbone, params, seed=1)
        np.testing.assert_array_equal(grid.centroid_feats, brute.centroid_feats)

    def test_empty_frame(self, cfg, params):
        with pytest.raises(Failed, match="empty"):
            backbone_forward(PointCloud(np.zeros((0, 3))), cfg.backbone, params)


class TestFlow:
    def test_predict_shape(self, cfg, params):
        frame_t, frame_t1, _ = tiny_scene(0)
        sampled, flow = predict_flow(frame_t, frame_t1, cfg, params)
        assert sampled.shape == flow.shape == (cfg.backbone.n_sample, 3)

    def test_zero_output_layer_gives_zero_flow(self, cfg, params):
        last = len(cfg.flow_head.fc.layer_widths) - 1
        params.assign(f"s.fc.{last}.w", np.zeros_like(params.value(f"s.fc.{last}.w")))
        params.assign(f"s.fc.{last}.b", np.zeros_like(params.value(f"s.fc.{last}.b")))
        frame_t, frame_t1, _ = tiny_scene(0)
        report, result = flow_loss_and_grad(frame_t, frame_t1, cfg, params, backward=False)
        assert not np.any(result.flow_fwd)
        np.testing.assert_array_equal(result.propagated, result.enc1.sampled_xyz)
        assert report.cycle_loss == 0.0

    def test_every_backbone_parameter_gets_gradient(self, cfg, params):
        frame_t, frame_t1, _ = tiny_scene(0)
        params.zero_grad()
        flow_loss_and_grad(frame_t, frame_t1, cfg, params)
        for name in params.names(["g"]):
            assert np.any(params.grad(name)), name
        for name in params.names(["h"]):
            assert not np.any(params.grad(name)), name

    def test_loss_is_finite_and_positive(self, cfg, params):
        frame_t, frame_t1, _ = tiny_scene(3)
        report, _ = flow_loss_and_grad(frame_t, frame_t1, cfg, params, backward=False)
        assert math.isfinite(report.total)
        assert report.nn_loss > 0.0


class TestDetection:
    def test_heatmap_shapes(self, cfg, params):
        cloud, _, _ = tiny_scene(0)
        encoding = backbone_forward(cloud, cfg.backbone, params)
        heatmap, regmap, _ = detect_head_forward(encoding, cfg.detect_head, params)
        cells = cfg.detect_head.bev_cells
        assert heatmap.shape == (cfg.detect_head.num_classes, cells, cells)
        assert regmap.shape == (cells, cells, 8)
        assert np.all((heatmap > 0) & (heatmap < 1))

    def test_no_points_in_extent_gives_prior(self, cfg, params):
        far = PointCloud(np.column_stack([np.full(40, 100.0), np.linspace(0, 1, 40), np.zeros(40)]))
        encoding = backbone_forward(far, cfg.backbone, params)
        heatmap, _, _ = detect_head_forward(encoding, cfg.detect_head, params)
        np.testing.assert_allclose(heatmap, 1.0 / (1.0 + math.exp(-HEATMAP_PRIOR)), rtol=1e-12)

    def test_loss_updates_backbone_and_detection_head_only(self, cfg, params):
        cloud, _, boxes = tiny_scene(0)
        params.zero_grad()
        report, _ = detection_loss_and_grad(cloud, boxes, cfg, params)
        assert report.total > 0.0
        assert any(np.any(params.grad(n)) for n in params.names(["h"]))
        assert any(np.any(params.grad(n)) for n in params.names(["g"]))
        assert not any(np.any(params.grad(n)) for n in params.names(["s"]))

    def test_plan_reuse_matches_fresh_sampling(self, cfg, params):
        cloud, _, boxes = tiny_scene(4)
        plan = plan_sampling(cloud, cfg.backbone, seed=7)
        fresh, _ = detection_loss_and_grad(cloud, boxes, cfg, params, seed=7, backward=False)
        planned, _ = detection_loss_and_grad(cloud, boxes, cfg, params, seed=7, plan=plan, backward=False)
        assert planned.total == fresh.total
