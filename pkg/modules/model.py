"""Per-frame backbone (g), scene-flow head (s) and BEV center-heatmap detection head (h)."""

import numpy as np

from modules import losses
from modules import util
from modules.numeric import Mlp
from modules.numeric import MlpSpec
from modules.numeric import ModelParams
from modules.numeric import check_finite
from modules.numeric import conv3x3_backward
from modules.numeric import conv3x3_forward
from modules.numeric import he_normal
from modules.numeric import max_pool_rows
from modules.numeric import max_pool_rows_backward
from modules.numeric import relu_backward
from modules.numeric import relu_forward
from modules.numeric import sigmoid_forward
from modules.pointops import GridIndex
from modules.pointops import apply_interpolation
from modules.pointops import ball_query
from modules.pointops import farthest_point_sample
from modules.pointops import group_features
from modules.pointops import group_features_backward
from modules.pointops import groups_from_knn
from modules.pointops import interpolation_backward
from modules.pointops import interpolation_weights
from modules.util import Failed

logger = util.logger

INPUT_FEATURES = 1
REG_CHANNELS = 8
HEATMAP_PRIOR = -2.19
NEIGHBOR_SEARCH = {"brute": "Brute-force neighbor search", "grid": "Uniform grid accelerator"}


def _spec(value, linear_output=False):
    if isinstance(value, MlpSpec):
        return value
    if isinstance(value, dict):
        return MlpSpec(value["layer_widths"], value.get("activations"))
    return MlpSpec.linear_output(value) if linear_output else MlpSpec(value)


class BackboneConfig:
    """One set-conv stage over FPS centroids plus feature propagation back to the sampled points"""

    def __init__(self, n_sample=2048, n_centroids=256, radius=0.5, max_k=16, mlp=(32, 64), neighbor_search="brute"):
        self.n_sample = int(n_sample)
        self.n_centroids = int(n_centroids)
        self.radius = float(radius)
        self.max_k = int(max_k)
        self.mlp = _spec(mlp)
        self.neighbor_search = neighbor_search
        if self.n_centroids < 1 or self.n_centroids > self.n_sample:
            raise Failed(f"Config Error: backbone n_centroids must be in [1, n_sample={self.n_sample}], got {self.n_centroids}")
        if self.radius <= 0:
            raise Failed(f"Config Error: backbone radius must be > 0, got {self.radius}")
        if self.max_k < 1:
            raise Failed(f"Config Error: backbone max_k must be >= 1, got {self.max_k}")
        if neighbor_search not in NEIGHBOR_SEARCH:
            raise Failed(f"Config Error: neighbor_search must be one of {list(NEIGHBOR_SEARCH)}, got {neighbor_search}")

    @property
    def out_dim(self):
        return self.mlp.out_dim

    def as_dict(self):
        return {
            "n_sample": self.n_sample,
            "n_centroids": self.n_centroids,
            "radius": self.radius,
            "max_k": self.max_k,
            "mlp": self.mlp.as_dict(),
            "neighbor_search": self.neighbor_search,
        }


class FlowHeadConfig:
    """Flow embedding, one set-conv, set upconv and fully connected layers"""

    def __init__(
        self,
        embed_k=16,
        embed_mlp=(64, 64),
        setconv_radius=2.0,
        setconv_max_k=8,
        setconv_mlp=(64,),
        upconv_mlp=(64, 64),
        fc=(32, 3),
        fc_init_scale=0.1,
    ):
        self.embed_k = int(embed_k)
        self.embed_mlp = _spec(embed_mlp)
        self.setconv_radius = float(setconv_radius)
        self.setconv_max_k = int(setconv_max_k)
        self.setconv_mlp = _spec(setconv_mlp)
        self.upconv_mlp = _spec(upconv_mlp)
        self.fc = _spec(fc, linear_output=True)
        self.fc_init_scale = float(fc_init_scale)
        if self.fc.out_dim != 3 or self.fc.activations[-1] != "none":
            raise Failed(f"Config Error: flow_head fc must end in a linear layer of width 3, got {self.fc}")
        if self.embed_k < 1 or self.setconv_max_k < 1 or self.setconv_radius <= 0:
            raise Failed("Config Error: flow_head embed_k, setconv_max_k and setconv_radius must be positive")

    def as_dict(self):
        return {
            "embed_k": self.embed_k,
            "embed_mlp": self.embed_mlp.as_dict(),
            "setconv_radius": self.setconv_radius,
            "setconv_max_k": self.setconv_max_k,
            "setconv_mlp": self.setconv_mlp.as_dict(),
            "upconv_mlp": self.upconv_mlp.as_dict(),
            "fc": self.fc.as_dict(),
            "fc_init_scale": self.fc_init_scale,
        }


class DetectHeadConfig:
    """Square BEV grid centered on the sensor; regression channels (dx, dy, z, log w, log l, log h, sin, cos)"""

    def __init__(self, bev_extent=20.0, bev_cells=64, conv_channels=32, reg_channels=REG_CHANNELS, num_classes=1):
        self.bev_extent = float(bev_extent)
        self.bev_cells = int(bev_cells)
        self.conv_channels = int(conv_channels)
        self.reg_channels = int(reg_channels)
        self.num_classes = int(num_classes)
        if self.reg_channels != REG_CHANNELS:
            raise Failed(f"Config Error: detect_head reg_channels must be {REG_CHANNELS}, got {self.reg_channels}")
        if self.bev_extent <= 0 or self.bev_cells < 1 or self.conv_channels < 1 or self.num_classes < 1:
            raise Failed("Config Error: detect_head bev_extent, bev_cells, conv_channels and num_classes must be positive")

    @property
    def cell_size(self):
        return 2.0 * self.bev_extent / self.bev_cells

    def as_dict(self):
        return {
            "bev_extent": self.bev_extent,
            "bev_cells": self.bev_cells,
            "conv_channels": self.conv_channels,
            "reg_channels": self.reg_channels,
            "num_classes": self.num_classes,
        }


class ModelConfig:
    def __init__(self, backbone=None, flow_head=None, detect_head=None):
        self.backbone = backbone or BackboneConfig()
        self.flow_head = flow_head or FlowHeadConfig()
        self.detect_head = detect_head or DetectHeadConfig()

    def as_dict(self):
        return {
            "backbone": self.backbone.as_dict(),
            "flow_head": self.flow_head.as_dict(),
            "detect_head": self.detect_head.as_dict(),
        }


def backbone_mlp(cfg):
    return Mlp("g.setconv", INPUT_FEATURES + 3, cfg.mlp)


def flow_mlps(backbone_cfg, cfg):
    d = backbone_cfg.out_dim
    embed = Mlp("s.embed", 2 * d + 3, cfg.embed_mlp)
    setconv = Mlp("s.setconv", cfg.embed_mlp.out_dim + 3, cfg.setconv_mlp)
    upconv = Mlp("s.upconv", cfg.setconv_mlp.out_dim + d, cfg.upconv_mlp)
    fc = Mlp("s.fc", cfg.upconv_mlp.out_dim, cfg.fc)
    return embed, setconv, upconv, fc


def detect_heads(cfg):
    hm = Mlp("h.hm", cfg.conv_channels, MlpSpec([cfg.num_classes], ["none"]))
    reg = Mlp("h.reg", cfg.conv_channels, MlpSpec([REG_CHANNELS], ["none"]))
    return hm, reg


def init_model_params(model_cfg, seed=0, dtype=np.float32):
    """
    Fresh parameters for all three networks.

    Each namespace draws from its own generator so that re-initialising one namespace
    never shifts the values of another.
    """
    params = ModelParams(dtype=dtype, configs=model_cfg.as_dict())
    init_namespace(params, model_cfg, "g", seed)
    init_namespace(params, model_cfg, "s", seed)
    init_namespace(params, model_cfg, "h", seed)
    return params


def init_namespace(params, model_cfg, namespace, seed):
    rng = np.random.default_rng([int(seed), ModelParams.NAMESPACES.index(namespace)])
    if namespace == "g":
        backbone_mlp(model_cfg.backbone).init(params, rng)
    elif namespace == "s":
        embed, setconv, upconv, fc = flow_mlps(model_cfg.backbone, model_cfg.flow_head)
        embed.init(params, rng)
        setconv.init(params, rng)
        upconv.init(params, rng)
        fc.init(params, rng, final_scale=model_cfg.flow_head.fc_init_scale)
    else:
        cfg = model_cfg.detect_head
        d = model_cfg.backbone.out_dim
        k = cfg.conv_channels
        params.add("h.conv.0.w", he_normal(rng, 9 * d, k, params.dtype))
        params.add("h.conv.0.b", np.zeros(k, dtype=params.dtype))
        params.add("h.conv.1.w", he_normal(rng, 9 * k, k, params.dtype))
        params.add("h.conv.1.b", np.zeros(k, dtype=params.dtype))
        hm, reg = detect_heads(cfg)
        hm.init(params, rng)
        reg.init(params, rng)
        params.assign("h.hm.0.b", np.full(cfg.num_classes, HEATMAP_PRIOR))


def reinit_namespace(params, model_cfg, namespace, seed):
    """Overwrite one namespace with fresh values, identical to what init_model_params draws for it"""
    fresh = ModelParams(dtype=params.dtype, configs=params.configs)
    init_namespace(fresh, model_cfg, namespace, seed)
    for name in fresh:
        params.assign(name, fresh.value(name))
        params.grad(name)[...] = 0


class SamplingPlan:
    """FPS samples, centroids and the position-only neighbor structures of one frame"""

    def __init__(self, cloud, cfg, sample_index, centroid_index):
        self.sample_index = np.asarray(sample_index, dtype=np.int64)
        self.centroid_index = np.asarray(centroid_index, dtype=np.int64)
        self.sampled_xyz = cloud.xyz[self.sample_index]
        self.centroids = self.sampled_xyz[self.centroid_index]
        self.input_feats = cloud.features[self.sample_index]
        index = GridIndex(self.sampled_xyz, cfg.radius) if cfg.neighbor_search == "grid" else None
        self.groups = ball_query(self.centroids, self.sampled_xyz, cfg.radius, cfg.max_k, index=index)
        self.interp = interpolation_weights(self.sampled_xyz, self.centroids)


def plan_sampling(cloud, cfg, seed=0):
    """Sample n_sample points by FPS (seed), then n_centroids of them by FPS (seed + 1)"""
    if len(cloud) == 0:
        raise Failed(f"Backbone Error: frame {cloud.frame_id} is empty")
    sample_index = farthest_point_sample(cloud, cfg.n_sample, seed=seed)
    centroid_index = farthest_point_sample(cloud.xyz[sample_index], cfg.n_centroids, seed=seed + 1)
    return SamplingPlan(cloud, cfg, sample_index, centroid_index)


class FrameEncoding:
    """
    Backbone output for one frame.

    Iterating yields (sampled_xyz, sampled_feats, centroids, centroid_feats).
    """

    def __init__(self, sampled_xyz, sampled_feats, centroids, centroid_feats, centroid_index, cache=None):
        self.sampled_xyz = sampled_xyz
        self.sampled_feats = sampled_feats
        self.centroids = centroids
        self.centroid_feats = centroid_feats
        self.centroid_index = centroid_index
        self.cache = cache

    def __iter__(self):
        return iter((self.sampled_xyz, self.sampled_feats, self.centroids, self.centroid_feats))

    @property
    def layout(self):
        return len(self.sampled_xyz), len(self.centroids), self.sampled_feats.shape[1], self.centroid_feats.shape[1]


def backbone_forward(cloud, cfg, params, seed=0, plan=None):
    """Encode one frame; `plan` (from plan_sampling) skips the sampling and neighbor search"""
    if len(cloud) == 0:
        raise Failed(f"Backbone Error: frame {cloud.frame_id} is empty")
    if plan is None:
        plan = plan_sampling(cloud, cfg, seed)
    mlp = backbone_mlp(cfg)
    rows = group_features(plan.groups, plan.input_feats.astype(params.dtype))
    hidden, mlp_cache = mlp.forward(params, rows)
    centroid_feats, argmax = max_pool_rows(hidden)
    idx, weights = plan.interp
    sampled_feats = apply_interpolation(idx, weights, centroid_feats)
    cache = {"plan": plan, "mlp": mlp, "mlp_cache": mlp_cache, "argmax": argmax}
    return FrameEncoding(plan.sampled_xyz, sampled_feats, plan.centroids, centroid_feats, plan.centroid_index, cache)


def backbone_backward(params, encoding, d_sampled_feats=None, d_centroid_feats=None):
    """Accumulate g.* gradients from gradients on the encoding's features"""
    cache = encoding.cache
    plan = cache["plan"]
    d_centroid = np.zeros_like(encoding.centroid_feats)
    if d_centroid_feats is not None:
        d_centroid += d_centroid_feats
    if d_sampled_feats is not None:
        idx, weights = plan.interp
        d_centroid += interpolation_backward(idx, weights, d_sampled_feats, len(encoding.centroids))
    d_hidden = max_pool_rows_backward(cache["argmax"], d_centroid, plan.groups.width)
    cache["mlp"].backward(params, cache["mlp_cache"], d_hidden)


class FlowGeometry:
    """Position-only structures of the flow head; constant with respect to every parameter"""

    def __init__(self, enc1, enc2, cfg):
        self.embed = groups_from_knn(enc1.centroids, enc2.centroids, cfg.embed_k)
        self.setconv = ball_query(enc1.centroids, enc1.centroids, cfg.setconv_radius, cfg.setconv_max_k)
        self.upconv = interpolation_weights(enc1.sampled_xyz, enc1.centroids)


def flow_head_forward(enc1, enc2, backbone_cfg, cfg, params, geometry=None):
    """
    Flow from frame 1 to frame 2 over frame 1's sampled points.

    Returns:
        tuple: (flow (n_sample, 3), cache for flow_head_backward)
    """
    if enc1.layout[2:] != enc2.layout[2:] or len(enc1.sampled_xyz) != len(enc2.sampled_xyz):
        raise Failed(f"Config Error: frames encoded with different backbone layouts {enc1.layout} vs {enc2.layout}")
    if geometry is None:
        geometry = FlowGeometry(enc1, enc2, cfg)
    embed, setconv, upconv, fc = flow_mlps(backbone_cfg, cfg)
    dtype = params.dtype
    n_c, k = geometry.embed.indices.shape
    d = enc1.centroid_feats.shape[1]

    own = np.broadcast_to(enc1.centroid_feats[:, None, :], (n_c, k, d))
    other = enc2.centroid_feats[geometry.embed.indices]
    rows = np.concatenate([own, other, geometry.embed.displacements.astype(dtype)], axis=-1)
    hidden, embed_cache = embed.forward(params, rows)
    embedding, embed_argmax = max_pool_rows(hidden)

    rows = group_features(geometry.setconv, embedding)
    hidden, setconv_cache = setconv.forward(params, rows)
    motion, setconv_argmax = max_pool_rows(hidden)

    idx, weights = geometry.upconv
    rows = np.concatenate([apply_interpolation(idx, weights, motion), enc1.sampled_feats], axis=-1)
    point_feats, upconv_cache = upconv.forward(params, rows)
    flow, fc_cache = fc.forward(params, point_feats)

    cache = {
        "geometry": geometry,
        "mlps": (embed, setconv, upconv, fc),
        "embed": (embed_cache, embed_argmax),
        "setconv": (setconv_cache, setconv_argmax),
        "upconv": upconv_cache,
        "fc": fc_cache,
        "dims": (n_c, len(enc2.centroids), d, motion.shape[1]),
    }
    return flow, cache


def flow_head_backward(params, cache, d_flow):
    """
    Accumulate s.* gradients.

    Returns:
        tuple: gradients w.r.t. (frame-1 sampled_feats, frame-1 centroid_feats, frame-2 centroid_feats)
    """
    embed, setconv, upconv, fc = cache["mlps"]
    geometry = cache["geometry"]
    n_c1, n_c2, d, motion_dim = cache["dims"]

    d_points = fc.backward(params, cache["fc"], d_flow)
    d_rows = upconv.backward(params, cache["upconv"], d_points)
    d_sampled = d_rows[:, motion_dim:]
    idx, weights = geometry.upconv
    d_motion = interpolation_backward(idx, weights, d_rows[:, :motion_dim], n_c1)

    setconv_cache, setconv_argmax = cache["setconv"]
    d_hidden = max_pool_rows_backward(setconv_argmax, d_motion, geometry.setconv.width)
    d_rows = setconv.backward(params, setconv_cache, d_hidden)
    d_embedding = group_features_backward(geometry.setconv, d_rows, n_c1)

    embed_cache, embed_argmax = cache["embed"]
    d_hidden = max_pool_rows_backward(embed_argmax, d_embedding, geometry.embed.width)
    d_rows = embed.backward(params, embed_cache, d_hidden)
    d_own = d_rows[..., :d].sum(axis=1)
    d_other = np.zeros((n_c2, d), dtype=d_rows.dtype)
    np.add.at(d_other, geometry.embed.indices.reshape(-1), d_rows[..., d : 2 * d].reshape(-1, d))
    return d_sampled, d_own, d_other


def propagated_encoding(enc1, positions):
    """Virtual frame at the propagated positions, carrying frame 1's features"""
    return FrameEncoding(
        positions, enc1.sampled_feats, positions[enc1.centroid_index], enc1.centroid_feats, enc1.centroid_index
    )


class FlowPass:
    """Everything forward_backward_flow produces for one frame pair"""

    def __init__(self, enc1, enc2, flow_fwd, propagated, flow_bwd, reconstructed, caches, frozen):
        self.enc1 = enc1
        self.enc2 = enc2
        self.flow_fwd = flow_fwd
        self.propagated = propagated
        self.flow_bwd = flow_bwd
        self.reconstructed = reconstructed
        self.caches = caches
        self.frozen = frozen

    def __iter__(self):
        return iter((self.flow_fwd, self.propagated, self.flow_bwd, self.reconstructed))


def forward_backward_flow(frame_t, frame_t1, model_cfg, params, seed=0, plans=None, frozen=None):
    """
    Forward flow t -> t+1, propagation, backward flow from the propagated points against frame t.

    The same s.* weights serve both directions. Positions are constants for every
    gradient: `frozen` pins the propagated positions used as geometry of the backward pass
    (gradient checks pass the value recorded by an earlier call).
    """
    if plans is None:
        plans = (plan_sampling(frame_t, model_cfg.backbone, seed), plan_sampling(frame_t1, model_cfg.backbone, seed))
    enc1 = backbone_forward(frame_t, model_cfg.backbone, params, plan=plans[0])
    enc2 = backbone_forward(frame_t1, model_cfg.backbone, params, plan=plans[1])
    flow_fwd, cache_fwd = flow_head_forward(enc1, enc2, model_cfg.backbone, model_cfg.flow_head, params)
    propagated = enc1.sampled_xyz + flow_fwd
    geometry_positions = propagated.copy() if frozen is None else frozen["propagated"]
    enc_bwd = propagated_encoding(enc1, geometry_positions)
    geometry = None if frozen is None else frozen.get("geometry")
    flow_bwd, cache_bwd = flow_head_forward(enc_bwd, enc1, model_cfg.backbone, model_cfg.flow_head, params, geometry)
    reconstructed = propagated + flow_bwd
    frozen = {"propagated": geometry_positions, "geometry": cache_bwd["geometry"], **(frozen or {})}
    return FlowPass(enc1, enc2, flow_fwd, propagated, flow_bwd, reconstructed, (cache_fwd, cache_bwd), frozen)


def flow_loss_and_grad(frame_t, frame_t1, model_cfg, params, loss_cfg=None, seed=0, plans=None, frozen=None, backward=True):
    """
    Self-supervised loss of one frame pair; accumulates g.* and s.* gradients when `backward`.

    Returns:
        tuple: (FlowLossReport, FlowPass)
    """
    loss_cfg = loss_cfg or losses.LossConfig()
    result = forward_backward_flow(frame_t, frame_t1, model_cfg, params, seed=seed, plans=plans, frozen=frozen)
    report = losses.flow_total_loss(
        result.enc1.sampled_xyz,
        frame_t1,
        result.propagated,
        result.reconstructed,
        distance=loss_cfg.distance,
        nn_index=result.frozen.get("nn_index"),
    )
    result.frozen.setdefault("nn_index", report.nn_index)
    if not backward:
        return report, result
    dtype = params.dtype
    d_reconstructed = report.grad_reconstructed
    d_propagated = report.grad_propagated + d_reconstructed
    cache_fwd, cache_bwd = result.caches

    d_sampled_b, d_centroid_b, d_centroid_t = flow_head_backward(params, cache_bwd, d_reconstructed.astype(dtype))
    d_sampled_f, d_centroid_f, d_centroid_t1 = flow_head_backward(params, cache_fwd, d_propagated.astype(dtype))
    backbone_backward(params, result.enc1, d_sampled_b + d_sampled_f, d_centroid_b + d_centroid_t + d_centroid_f)
    backbone_backward(params, result.enc2, None, d_centroid_t1)
    return report, result


def bev_cells(xyz, cfg):
    """Flat BEV cell id (ix * C + iy) per point and the in-extent mask"""
    c = cfg.bev_cells
    ij = np.floor((xyz[:, :2] + cfg.bev_extent) / cfg.cell_size).astype(np.int64)
    inside = np.all((ij >= 0) & (ij < c), axis=1)
    return ij[:, 0] * c + ij[:, 1], inside


def detect_head_forward(encoding, cfg, params):
    """
    BEV scatter with per-cell max, two 3x3 conv layers, 1x1 heatmap and regression heads.

    Returns:
        tuple: (heatmap (num_classes, C, C) in (0, 1), regmap (C, C, 8), cache)
    """
    c = cfg.bev_cells
    dtype = params.dtype
    feats = encoding.sampled_feats
    d = feats.shape[1]
    cells, inside = bev_cells(encoding.sampled_xyz, cfg)
    point_ids = np.flatnonzero(inside)
    cell_ids = cells[inside]
    grid = np.zeros((c * c, d), dtype=dtype)
    winners = np.zeros((0, d), dtype=np.int64)
    occupied = np.unique(cell_ids)
    if len(point_ids) == 0:
        logger.warning(f"Detection Warning: none of {len(feats)} sampled points lies inside the BEV extent")
    else:
        grid[occupied] = -np.inf
        np.maximum.at(grid, cell_ids, feats[point_ids])
        won = feats[point_ids] == grid[cell_ids]
        first = np.full((c * c, d), len(feats), dtype=np.int64)
        np.minimum.at(first, cell_ids, np.where(won, point_ids[:, None], len(feats)))
        winners = first[occupied]

    z1, cols1 = conv3x3_forward(grid.reshape(c, c, d), params.value("h.conv.0.w"), params.value("h.conv.0.b"))
    a1 = relu_forward(z1)
    z2, cols2 = conv3x3_forward(a1, params.value("h.conv.1.w"), params.value("h.conv.1.b"))
    flat = relu_forward(z2).reshape(c * c, -1)

    hm_head, reg_head = detect_heads(cfg)
    logits, hm_cache = hm_head.forward(params, flat)
    reg, reg_cache = reg_head.forward(params, flat)
    heatmap = sigmoid_forward(logits).T.reshape(cfg.num_classes, c, c)
    regmap = reg.reshape(c, c, REG_CHANNELS)
    check_finite("detection heatmap", heatmap)
    cache = {
        "n_points": len(feats),
        "occupied": occupied,
        "winners": winners,
        "conv": (z1, cols1, z2, cols2),
        "heads": (hm_head, hm_cache, reg_head, reg_cache),
        "heatmap": heatmap,
    }
    return heatmap, regmap, cache


def detect_head_backward(params, cache, d_heatmap, d_regmap):
    """Accumulate h.* gradients; returns the gradient w.r.t. the encoding's sampled_feats"""
    hm_head, hm_cache, reg_head, reg_cache = cache["heads"]
    z1, cols1, z2, cols2 = cache["conv"]
    c = z2.shape[0]
    heatmap = cache["heatmap"]
    d_logits = (d_heatmap * heatmap * (1.0 - heatmap)).reshape(heatmap.shape[0], c * c).T
    d_flat = hm_head.backward(params, hm_cache, np.ascontiguousarray(d_logits).astype(params.dtype))
    d_flat = d_flat + reg_head.backward(params, reg_cache, d_regmap.reshape(c * c, REG_CHANNELS).astype(params.dtype))

    d_z2 = relu_backward(z2, d_flat.reshape(z2.shape))
    d_a1, dw, db = conv3x3_backward(cols2, params.value("h.conv.1.w"), d_z2)
    params.accumulate("h.conv.1.w", dw)
    params.accumulate("h.conv.1.b", db)
    d_z1 = relu_backward(z1, d_a1)
    d_grid, dw, db = conv3x3_backward(cols1, params.value("h.conv.0.w"), d_z1)
    params.accumulate("h.conv.0.w", dw)
    params.accumulate("h.conv.0.b", db)

    d = d_grid.shape[-1]
    d_grid = d_grid.reshape(c * c, d)
    d_feats = np.zeros((cache["n_points"], d), dtype=d_grid.dtype)
    occupied = cache["occupied"]
    if len(occupied):
        channels = np.broadcast_to(np.arange(d), cache["winners"].shape)
        np.add.at(d_feats, (cache["winners"], channels), d_grid[occupied])
    return d_feats


def detection_loss_and_grad(cloud, boxes, model_cfg, params, loss_cfg=None, seed=0, plan=None, targets=None, backward=True):
    """
    Supervised detection loss of one labeled frame; accumulates g.* and h.* gradients when `backward`.

    Returns:
        tuple: (DetectionLossReport, (heatmap, regmap))
    """
    loss_cfg = loss_cfg or losses.LossConfig()
    encoding = backbone_forward(cloud, model_cfg.backbone, params, seed=seed, plan=plan)
    heatmap, regmap, cache = detect_head_forward(encoding, model_cfg.detect_head, params)
    if targets is None:
        targets = losses.make_detection_targets(boxes, model_cfg.detect_head)
    hm_loss, d_heatmap = losses.focal_loss(heatmap, targets.heatmap_target, loss_cfg.focal_alpha, loss_cfg.focal_beta)
    reg_loss, d_regmap = losses.huber_loss(regmap, targets.reg_target, loss_cfg.huber_delta, targets.reg_mask)
    report = losses.detection_total_loss(hm_loss, reg_loss, loss_cfg.w_hm, loss_cfg.w_reg)
    if backward:
        d_feats = detect_head_backward(params, cache, loss_cfg.w_hm * d_heatmap, loss_cfg.w_reg * d_regmap)
        backbone_backward(params, encoding, d_feats.astype(params.dtype), None)
    return report, (heatmap, regmap)


def predict_flow(frame_t, frame_t1, model_cfg, params, seed=0, plans=None):
    """Forward flow only; returns (sampled_xyz, flow)"""
    if plans is None:
        plans = (plan_sampling(frame_t, model_cfg.backbone, seed), plan_sampling(frame_t1, model_cfg.backbone, seed))
    enc1 = backbone_forward(frame_t, model_cfg.backbone, params, plan=plans[0])
    enc2 = backbone_forward(frame_t1, model_cfg.backbone, params, plan=plans[1])
    flow, _ = flow_head_forward(enc1, enc2, model_cfg.backbone, model_cfg.flow_head, params)
    return enc1.sampled_xyz, flow
