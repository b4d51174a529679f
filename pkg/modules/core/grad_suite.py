import numpy as np

from modules import util
from modules.data import Box
from modules.losses import LossConfig
from modules.losses import cycle_consistency_loss
from modules.losses import focal_loss
from modules.losses import huber_loss
from modules.losses import make_detection_targets
from modules.losses import nearest_neighbor_loss
from modules.model import BackboneConfig
from modules.model import DetectHeadConfig
from modules.model import FlowHeadConfig
from modules.model import ModelConfig
from modules.model import detection_loss_and_grad
from modules.model import flow_loss_and_grad
from modules.model import init_model_params
from modules.model import plan_sampling
from modules.numeric import Mlp
from modules.numeric import MlpSpec
from modules.numeric import ModelParams
from modules.numeric import conv3x3_backward
from modules.numeric import conv3x3_forward
from modules.numeric import grad_check
from modules.numeric import linear_backward
from modules.numeric import linear_forward
from modules.numeric import max_pool_rows
from modules.numeric import max_pool_rows_backward
from modules.numeric import relu_backward
from modules.numeric import relu_forward
from modules.numeric import sigmoid_forward
from modules.pointops import PointCloud
from modules.pointops import apply_interpolation
from modules.pointops import ball_query
from modules.pointops import group_features
from modules.pointops import group_features_backward
from modules.pointops import interpolation_backward
from modules.pointops import interpolation_weights

logger = util.logger

OP_RTOL = 1e-4
MODEL_RTOL = 1e-3
MODEL_POINTS = 32


def tiny_model_config():
    """Model small enough for finite differences over a 32-point scene"""
    return ModelConfig(
        BackboneConfig(n_sample=MODEL_POINTS, n_centroids=8, radius=1.5, max_k=8, mlp=(8, 8)),
        FlowHeadConfig(
            embed_k=4, embed_mlp=(8,), setconv_radius=2.0, setconv_max_k=4, setconv_mlp=(8,), upconv_mlp=(8,), fc=(8, 3),
            fc_init_scale=1.0,
        ),
        DetectHeadConfig(bev_extent=3.0, bev_cells=6, conv_channels=4),
    )


def tiny_scene(seed=0, n=MODEL_POINTS):
    """Two frames of n points: the second is the first shifted by (0.3, 0.1, 0) plus noise"""
    rng = np.random.default_rng(seed)
    xyz = np.column_stack([rng.uniform(-2.0, 2.0, (n, 2)), rng.uniform(0.0, 1.0, n)])
    reflectance = rng.uniform(0.0, 1.0, n)
    moved = xyz + np.array([0.3, 0.1, 0.0]) + rng.normal(0.0, 0.02, xyz.shape)
    boxes = [Box((0.5, -0.5, 0.5), (1.6, 3.9, 1.5), 0.3)]
    return PointCloud(xyz, reflectance, 0), PointCloud(moved, reflectance, 1), boxes


def _away_from_zero(rng, shape, margin=0.1):
    return rng.uniform(margin, 1.0, shape) * rng.choice([-1.0, 1.0], shape)


def _op_checks(rng, seed, distance):
    x = rng.standard_normal((5, 4))
    w = rng.standard_normal((4, 3))
    b = rng.standard_normal(3)

    def linear_grads(dy, x, w, b):
        dx, dw, db = linear_backward(x, w, dy)
        return {"x": dx, "w": dw, "b": db}

    yield grad_check(linear_forward, linear_grads, {"x": x, "w": w, "b": b}, OP_RTOL, seed=seed, name="linear")

    yield grad_check(
        relu_forward, lambda dy, x: {"x": relu_backward(x, dy)}, {"x": _away_from_zero(rng, (6, 5))}, OP_RTOL, seed=seed,
        name="relu",
    )

    def sigmoid_grads(dy, x):
        s = sigmoid_forward(x)
        return {"x": dy * s * (1.0 - s)}

    yield grad_check(sigmoid_forward, sigmoid_grads, {"x": 3.0 * rng.standard_normal((4, 4))}, OP_RTOL, seed=seed, name="sigmoid")

    # distinct values per column keep the argmax stable under the finite-difference step
    pool_in = rng.permutation(4 * 6 * 3).reshape(4, 6, 3) * 0.1 + rng.uniform(0.0, 0.01, (4, 6, 3))

    def pool_grads(dy, x):
        _, argmax = max_pool_rows(x)
        return {"x": max_pool_rows_backward(argmax, dy, x.shape[-2])}

    yield grad_check(lambda x: max_pool_rows(x)[0], pool_grads, {"x": pool_in}, OP_RTOL, seed=seed, name="max_pool_rows")

    def conv_grads(dy, x, w, b):
        _, cols = conv3x3_forward(x, w, b)
        dx, dw, db = conv3x3_backward(cols, w, dy)
        return {"x": dx, "w": dw, "b": db}

    conv_inputs = {"x": rng.standard_normal((5, 4, 2)), "w": rng.standard_normal((18, 3)), "b": rng.standard_normal(3)}
    yield grad_check(lambda x, w, b: conv3x3_forward(x, w, b)[0], conv_grads, conv_inputs, OP_RTOL, seed=seed, name="conv3x3")

    mlp = Mlp("g.check", 5, MlpSpec([6, 4], ["relu", "none"]))
    mlp_params = ModelParams(dtype=np.float64)
    mlp.init(mlp_params, rng)
    mlp_inputs = {"x": rng.standard_normal((3, 4, 5)), **{n.replace(".", "_"): mlp_params.value(n) for n in mlp_params}}

    def mlp_with(values):
        params = ModelParams(dtype=np.float64)
        for name in mlp_params:
            params.add(name, values[name.replace(".", "_")])
        return params

    def mlp_forward(x, **weights):
        return mlp.forward(mlp_with(weights), x)[0]

    def mlp_grads(dy, x, **weights):
        params = mlp_with(weights)
        _, cache = mlp.forward(params, x)
        grads = {"x": mlp.backward(params, cache, dy)}
        grads.update({n.replace(".", "_"): params.grad(n) for n in params})
        return grads

    yield grad_check(mlp_forward, mlp_grads, mlp_inputs, OP_RTOL, seed=seed, name="mlp")

    points = rng.uniform(-1.0, 1.0, (12, 3))
    groups = ball_query(points[:4], points, 0.8, 5)
    yield grad_check(
        lambda feats: group_features(groups, feats),
        lambda dy, feats: {"feats": group_features_backward(groups, dy, len(points))},
        {"feats": rng.standard_normal((12, 3))},
        OP_RTOL,
        seed=seed,
        name="group_features",
    )

    idx, weights = interpolation_weights(points, points[:5])
    yield grad_check(
        lambda feats: apply_interpolation(idx, weights, feats),
        lambda dy, feats: {"feats": interpolation_backward(idx, weights, dy, 5)},
        {"feats": rng.standard_normal((5, 4))},
        OP_RTOL,
        seed=seed,
        name="interpolate_features",
    )

    target = rng.uniform(-1.0, 1.0, (20, 3))
    propagated = rng.uniform(-1.0, 1.0, (10, 3))
    _, _, nn_index = nearest_neighbor_loss(propagated, target, distance)
    yield grad_check(
        lambda p: nearest_neighbor_loss(p, target, distance, nn_index)[0],
        lambda dy, p: {"p": dy * nearest_neighbor_loss(p, target, distance, nn_index)[1]},
        {"p": propagated},
        OP_RTOL,
        seed=seed,
        name=f"nearest_neighbor_loss ({distance})",
    )

    anchors = rng.uniform(-1.0, 1.0, (10, 3))
    yield grad_check(
        lambda r: cycle_consistency_loss(anchors, r, distance)[0],
        lambda dy, r: {"r": dy * cycle_consistency_loss(anchors, r, distance)[1]},
        {"r": anchors + rng.normal(0.0, 0.2, anchors.shape)},
        OP_RTOL,
        seed=seed,
        name=f"cycle_consistency_loss ({distance})",
    )

    heat_target = rng.uniform(0.0, 0.9, (1, 5, 5))
    heat_target[0, 2, 3] = 1.0
    yield grad_check(
        lambda p: focal_loss(p, heat_target)[0],
        lambda dy, p: {"p": dy * focal_loss(p, heat_target)[1]},
        {"p": rng.uniform(0.05, 0.95, (1, 5, 5))},
        OP_RTOL,
        seed=seed,
        name="focal_loss",
    )

    reg_target = rng.standard_normal((4, 4, 8))
    mask = rng.uniform(size=(4, 4)) < 0.5
    mask[0, 0] = True
    residual = _away_from_zero(rng, (4, 4, 8), margin=0.05) * 2.0
    residual[np.abs(np.abs(residual) - 1.0) < 0.05] += 0.1
    yield grad_check(
        lambda p: huber_loss(p, reg_target, 1.0, mask)[0],
        lambda dy, p: {"p": dy * huber_loss(p, reg_target, 1.0, mask)[1]},
        {"p": reg_target + residual},
        OP_RTOL,
        seed=seed,
        name="huber_loss",
    )


def _model_check(name, params, names, loss, seed):
    """Finite differences over the named parameters of a scalar `loss(params, backward)`"""

    def with_values(values):
        trial = params.copy()
        for n in names:
            trial.assign(n, values[n])
        return trial

    def forward(**values):
        return loss(with_values(values), backward=False)

    def backward(dy, **values):
        trial = with_values(values)
        trial.zero_grad()
        loss(trial, backward=True)
        return {n: dy * trial.grad(n) for n in names}

    return grad_check(forward, backward, {n: params.value(n) for n in names}, MODEL_RTOL, seed=seed, name=name)


def model_checks(seed=0, distance="squared"):
    """Composed flow and detection objectives on a 32-point scene, in 64-bit precision"""
    model_cfg = tiny_model_config()
    loss_cfg = LossConfig(distance=distance)
    frame_t, frame_t1, boxes = tiny_scene(seed)
    params = init_model_params(model_cfg, seed, np.float64)
    # zero biases put empty BEV cells exactly on the ReLU kink
    rng = np.random.default_rng([seed, 7])
    for name in params:
        if name.endswith(".b"):
            params.assign(name, params.value(name) + rng.normal(0.0, 0.1, params.value(name).shape))
    plans = (plan_sampling(frame_t, model_cfg.backbone, seed), plan_sampling(frame_t1, model_cfg.backbone, seed))
    _, first = flow_loss_and_grad(frame_t, frame_t1, model_cfg, params, loss_cfg, plans=plans, backward=False)
    frozen = first.frozen

    def flow_loss(trial, backward):
        report, _ = flow_loss_and_grad(frame_t, frame_t1, model_cfg, trial, loss_cfg, plans=plans, frozen=frozen, backward=backward)
        return report.total

    yield _model_check(f"full model: flow ({distance})", params, params.names(["g", "s"]), flow_loss, seed)

    targets = make_detection_targets(boxes, model_cfg.detect_head)

    def detect_loss(trial, backward):
        report, _ = detection_loss_and_grad(
            frame_t, boxes, model_cfg, trial, loss_cfg, plan=plans[0], targets=targets, backward=backward
        )
        return report.total

    yield _model_check("full model: detection", params, params.names(["g", "h"]), detect_loss, seed)


class GradSuite:
    """Finite-difference checks of every differentiable op and of the composed model"""

    def __init__(self, config=None, seed=None, include_model=True):
        self.seed = (config.seed if config is not None else 0) if seed is None else int(seed)
        self.distance = config.loss.distance if config is not None else "squared"
        self.include_model = include_model
        self.reports = []

        self.run()

    @property
    def passed(self):
        return all(report.passed for report in self.reports)

    @property
    def failures(self):
        return [report for report in self.reports if not report.passed]

    def run(self):
        logger.separator("Gradient Checks", space=False, border=False)
        rng = np.random.default_rng(self.seed)
        checks = list(_op_checks(rng, self.seed, self.distance))
        if self.include_model:
            checks += list(model_checks(self.seed, self.distance))
        for report in checks:
            self.reports.append(report)
            lines = list(report.lines())
            logger.print_line(lines[0], "INFO" if report.passed else "ERROR")
            for line in lines[1:]:
                logger.print_line(line, "DEBUG")
        logger.print_line(
            f"{len(self.reports) - len(self.failures)}/{len(self.reports)} gradient checks passed",
            "INFO" if self.passed else "ERROR",
        )
