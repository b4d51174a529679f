"""Training objectives: nearest-neighbor + cycle-consistency flow losses, focal + Huber detection losses."""

import math

import numpy as np

from modules import util
from modules.numeric import check_finite
from modules.pointops import PointCloud
from modules.pointops import knn
from modules.util import Failed
from modules.util import ShapeError

logger = util.logger

DISTANCES = {"squared": "Mean squared euclidean distance", "euclidean": "Mean euclidean distance"}
FOCAL_CLAMP = 1e-6
GAUSSIAN_TRUNCATION = 3.0


class LossConfig:
    def __init__(self, distance="squared", focal_alpha=2.0, focal_beta=4.0, huber_delta=1.0, w_hm=1.0, w_reg=2.0):
        if distance not in DISTANCES:
            raise Failed(f"Config Error: loss distance must be one of {list(DISTANCES)}, got {distance}")
        self.distance = distance
        self.focal_alpha = float(focal_alpha)
        self.focal_beta = float(focal_beta)
        self.huber_delta = float(huber_delta)
        self.w_hm = float(w_hm)
        self.w_reg = float(w_reg)

    def as_dict(self):
        return {
            "distance": self.distance,
            "focal_alpha": self.focal_alpha,
            "focal_beta": self.focal_beta,
            "huber_delta": self.huber_delta,
            "w_hm": self.w_hm,
            "w_reg": self.w_reg,
        }


def _paired_distance_loss(a, b, distance):
    """Mean (squared) euclidean distance between paired rows and its gradient w.r.t. a"""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = max(len(diff), 1)
    sq = np.einsum("nc,nc->n", diff, diff)
    if distance == "squared":
        return float(sq.sum() / n), 2.0 * diff / n
    norm = np.sqrt(sq)
    safe = np.where(norm > 0, norm, 1.0)
    grad = np.where(norm[:, None] > 0, diff / safe[:, None], 0.0) / n
    return float(norm.sum() / n), grad


def nearest_neighbor_loss(propagated, target_cloud, distance="squared", nn_index=None):
    """
    Distance of every propagated point to its nearest neighbor in the target frame.

    The assignment is held fixed for the gradient; `nn_index` re-uses a previous assignment.

    Returns:
        tuple: (loss, gradient w.r.t. propagated, nn_index)
    """
    target = target_cloud.xyz if isinstance(target_cloud, PointCloud) else np.asarray(target_cloud, dtype=np.float64)
    if len(target) == 0:
        raise Failed("Loss Error: nearest-neighbor target cloud is empty")
    propagated = np.asarray(propagated, dtype=np.float64)
    check_finite("propagated points", propagated)
    if nn_index is None:
        nn_index = knn(propagated, target, 1)[0][:, 0]
    loss, grad = _paired_distance_loss(propagated, target[nn_index], distance)
    return loss, grad, nn_index


def cycle_consistency_loss(anchors, reconstructed, distance="squared"):
    """Mean (squared) distance between each anchor and its reconstruction; gradient w.r.t. reconstructed"""
    anchors = np.asarray(anchors)
    reconstructed = np.asarray(reconstructed)
    if anchors.shape != reconstructed.shape:
        raise ShapeError(
            f"Shape Error: cycle_consistency_loss: anchors {tuple(anchors.shape)} vs reconstructed {tuple(reconstructed.shape)}"
        )
    check_finite("reconstructed points", reconstructed)
    return _paired_distance_loss(reconstructed, anchors, distance)


class FlowLossReport:
    def __init__(self, nn_loss, cycle_loss, grad_propagated=None, grad_reconstructed=None, nn_index=None):
        self.nn_loss = nn_loss
        self.cycle_loss = cycle_loss
        self.total = nn_loss + cycle_loss
        self.grad_propagated = grad_propagated
        self.grad_reconstructed = grad_reconstructed
        self.nn_index = nn_index

    def as_dict(self):
        return {"nn_loss": self.nn_loss, "cycle_loss": self.cycle_loss, "total": self.total}

    def __repr__(self):
        return f"FlowLossReport(nn={self.nn_loss:.6f}, cycle={self.cycle_loss:.6f}, total={self.total:.6f})"


def flow_total_loss(samples, target_cloud, propagated, reconstructed, distance="squared", nn_index=None):
    """nearest_neighbor_loss(P', P_t+1) + cycle_consistency_loss(samples, P''), unit weights"""
    samples = np.asarray(samples)
    propagated = np.asarray(propagated)
    if samples.shape != propagated.shape:
        raise ShapeError(f"Shape Error: flow_total_loss: samples {tuple(samples.shape)} vs propagated {tuple(propagated.shape)}")
    nn_loss, grad_p, nn_index = nearest_neighbor_loss(propagated, target_cloud, distance, nn_index=nn_index)
    cycle_loss, grad_r = cycle_consistency_loss(samples, reconstructed, distance)
    return FlowLossReport(nn_loss, cycle_loss, grad_p, grad_r, nn_index)


class DetectionTargets:
    def __init__(self, heatmap_target, reg_target, reg_mask, dropped=0):
        self.heatmap_target = heatmap_target
        self.reg_target = reg_target
        self.reg_mask = reg_mask
        self.dropped = dropped


def gaussian_sigma(box, cell_size):
    """Splat radius in cells: BEV diagonal / 6, at least one cell"""
    return max(1.0, math.hypot(box.size[0], box.size[1]) / cell_size / 6.0)


def encode_box(box, cfg):
    """Center cell (ix, iy) and the 8 regression values of a box"""
    cs = cfg.cell_size
    ix = int(math.floor((box.center[0] + cfg.bev_extent) / cs))
    iy = int(math.floor((box.center[1] + cfg.bev_extent) / cs))
    dx = (box.center[0] + cfg.bev_extent) / cs - (ix + 0.5)
    dy = (box.center[1] + cfg.bev_extent) / cs - (iy + 0.5)
    w, l, h = box.size
    values = (dx, dy, box.center[2], math.log(w), math.log(l), math.log(h), math.sin(box.yaw), math.cos(box.yaw))
    return ix, iy, np.array(values, dtype=np.float64)


def make_detection_targets(boxes, cfg):
    """
    Center-heatmap targets.

    Each box puts 1 at its center cell and a gaussian (truncated at 3 sigma) around it;
    overlapping splats combine by maximum. Boxes whose center falls outside the BEV
    extent are dropped and counted.
    """
    c = cfg.bev_cells
    heatmap = np.zeros((cfg.num_classes, c, c), dtype=np.float64)
    reg = np.zeros((c, c, 8), dtype=np.float64)
    mask = np.zeros((c, c), dtype=bool)
    grid_i, grid_j = np.meshgrid(np.arange(c), np.arange(c), indexing="ij")
    dropped = 0
    for box in boxes:
        if min(box.size) <= 0:
            raise Failed(f"Box Error: non-positive dimensions {tuple(box.size)}")
        ix, iy, values = encode_box(box, cfg)
        if not (0 <= ix < c and 0 <= iy < c):
            dropped += 1
            continue
        if not 0 <= box.class_id < cfg.num_classes:
            raise Failed(f"Box Error: class id {box.class_id} outside [0, {cfg.num_classes})")
        sigma = gaussian_sigma(box, cfg.cell_size)
        d2 = (grid_i - ix) ** 2 + (grid_j - iy) ** 2
        splat = np.exp(-d2 / (2.0 * sigma * sigma))
        splat[d2 > (GAUSSIAN_TRUNCATION * sigma) ** 2] = 0.0
        splat[ix, iy] = 1.0
        np.maximum(heatmap[box.class_id], splat, out=heatmap[box.class_id])
        reg[ix, iy] = values
        mask[ix, iy] = True
    if dropped:
        logger.warning(f"Target Warning: {dropped} box(es) outside the BEV extent dropped")
    return DetectionTargets(heatmap, reg, mask, dropped)


def focal_loss(pred, target, alpha=2.0, beta=4.0):
    """
    Penalty-reduced focal loss over a center heatmap.

    Predictions are clamped to [1e-6, 1 - 1e-6]; clamped entries get zero gradient.

    Returns:
        tuple: (loss, gradient w.r.t. pred)
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"Shape Error: focal_loss: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    check_finite("heatmap prediction", pred)
    raw = pred.astype(np.float64)
    p = np.clip(raw, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)
    pos = target == 1.0
    n_pos = max(1, int(pos.sum()))
    neg_weight = (1.0 - target) ** beta

    pos_terms = (1.0 - p) ** alpha * np.log(p)
    neg_terms = neg_weight * p**alpha * np.log(1.0 - p)
    loss = -(pos_terms[pos].sum() + neg_terms[~pos].sum()) / n_pos

    d_pos = -alpha * (1.0 - p) ** (alpha - 1.0) * np.log(p) + (1.0 - p) ** alpha / p
    d_neg = neg_weight * (alpha * p ** (alpha - 1.0) * np.log(1.0 - p) - p**alpha / (1.0 - p))
    grad = -np.where(pos, d_pos, d_neg) / n_pos
    grad[(raw < FOCAL_CLAMP) | (raw > 1.0 - FOCAL_CLAMP)] = 0.0
    return float(loss), grad


def huber_loss(pred, target, delta=1.0, mask=None):
    """
    Mean Huber loss over the masked cells (every channel of a masked cell counts).

    Returns:
        tuple: (loss, gradient w.r.t. pred)
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"Shape Error: huber_loss: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if mask is None:
        mask = np.ones(pred.shape[:-1], dtype=bool)
    grad = np.zeros(pred.shape, dtype=np.float64)
    if not np.any(mask):
        logger.warning("Loss Warning: Huber mask is empty, regression loss is 0")
        return 0.0, grad
    r = pred[mask].astype(np.float64) - target[mask]
    small = np.abs(r) <= delta
    values = np.where(small, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta))
    n = r.size
    grad[mask] = np.where(small, r, delta * np.sign(r)) / n
    return float(values.sum() / n), grad


class DetectionLossReport:
    def __init__(self, heatmap, regression, total):
        self.heatmap = heatmap
        self.regression = regression
        self.total = total

    def as_dict(self):
        return {"heatmap_loss": self.heatmap, "regression_loss": self.regression, "total": self.total}

    def __repr__(self):
        return f"DetectionLossReport(heatmap={self.heatmap:.6f}, regression={self.regression:.6f}, total={self.total:.6f})"


def detection_total_loss(heatmap_loss, regression_loss, w_hm=1.0, w_reg=2.0):
    return DetectionLossReport(heatmap_loss, regression_loss, w_hm * heatmap_loss + w_reg * regression_loss)
