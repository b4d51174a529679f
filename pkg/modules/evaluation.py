"""Flow end-point error, box decoding, rotated BEV IoU, NMS and 40-point interpolated average precision."""

import csv
import math

import numpy as np

from modules import util
from modules.data import Box
from modules.pointops import knn
from modules.util import ShapeError

logger = util.logger

STATIC_THRESHOLD = 1e-3
N_RECALL = 40
DISTANCE_BINS = (0.0, 10.0, 20.0, math.inf)
BIN_NAMES = ("near", "mid", "far")


def flow_at_samples(frame_xyz, gt_flow, sampled_xyz):
    """Ground-truth flow of every sampled point, taken from its nearest frame point"""
    nearest, _ = knn(sampled_xyz, frame_xyz, 1)
    return np.asarray(gt_flow)[nearest[:, 0]]


def epe(pred_flow, gt_flow):
    """Mean euclidean norm of the flow error, in meters"""
    pred_flow = np.asarray(pred_flow, dtype=np.float64)
    gt_flow = np.asarray(gt_flow, dtype=np.float64)
    if pred_flow.shape != gt_flow.shape:
        raise ShapeError(f"Shape Error: epe: pred {tuple(pred_flow.shape)} vs gt {tuple(gt_flow.shape)}")
    if len(pred_flow) == 0:
        return 0.0
    return float(np.linalg.norm(pred_flow - gt_flow, axis=1).mean())


def epe_split(pred_flow, gt_flow, threshold=STATIC_THRESHOLD):
    """EPE over all, static (|gt| <= threshold) and dynamic points; NaN for an empty group"""
    pred_flow = np.asarray(pred_flow, dtype=np.float64)
    gt_flow = np.asarray(gt_flow, dtype=np.float64)
    moving = np.linalg.norm(gt_flow, axis=1) > threshold
    return {
        "epe": epe(pred_flow, gt_flow),
        "epe_static": epe(pred_flow[~moving], gt_flow[~moving]) if np.any(~moving) else math.nan,
        "epe_dynamic": epe(pred_flow[moving], gt_flow[moving]) if np.any(moving) else math.nan,
        "epe_zero_flow": epe(np.zeros_like(gt_flow), gt_flow),
    }


def _peaks(channel):
    """Local maxima over the 3x3 neighborhood; equal neighbors resolve to the lower flat index"""
    c = channel.shape[0]
    padded = np.pad(channel, 1, constant_values=-np.inf)
    keep = np.ones_like(channel, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            neighbor = padded[1 + di : 1 + di + c, 1 + dj : 1 + dj + channel.shape[1]]
            lower = di < 0 or (di == 0 and dj < 0)
            keep &= channel > neighbor if lower else channel >= neighbor
    return keep


def decode_detections(heatmap, regmap, cfg, peak_threshold=0.3, max_dets=50):
    """
    Boxes at heatmap peaks scoring >= peak_threshold, best max_dets first.

    Center = cell center + (dx, dy) cells, z direct, sizes exp(log), yaw atan2(sin, cos).
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if heatmap.ndim == 2:
        heatmap = heatmap[None]
    regmap = np.asarray(regmap, dtype=np.float64)
    cs = cfg.cell_size
    found = []
    for class_id, channel in enumerate(heatmap):
        keep = _peaks(channel) & (channel >= peak_threshold)
        for ix, iy in zip(*np.nonzero(keep)):
            found.append((-channel[ix, iy], class_id, ix, iy))
    found.sort()
    boxes = []
    for neg_score, class_id, ix, iy in found[:max_dets]:
        dx, dy, z, lw, ll, lh, s, c = regmap[ix, iy]
        x = -cfg.bev_extent + (ix + 0.5 + dx) * cs
        y = -cfg.bev_extent + (iy + 0.5 + dy) * cs
        sizes = np.exp(np.clip([lw, ll, lh], -10.0, 10.0))
        boxes.append(Box((x, y, z), sizes, math.atan2(s, c), class_id, -neg_score))
    return boxes


def polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def clip_polygon(subject, clip):
    """Sutherland-Hodgman clipping of a polygon by a convex counter-clockwise polygon"""
    output = [tuple(p) for p in subject]
    for i in range(len(clip)):
        if not output:
            break
        e0, e1 = clip[i], clip[(i + 1) % len(clip)]
        points, output = output, []
        for j, cur in enumerate(points):
            prev = points[j - 1]
            cur_in = _cross(e0, e1, cur) >= 0
            prev_in = _cross(e0, e1, prev) >= 0
            if cur_in != prev_in:
                dx1, dy1 = cur[0] - prev[0], cur[1] - prev[1]
                dx2, dy2 = e1[0] - e0[0], e1[1] - e0[1]
                denom = dx1 * dy2 - dy1 * dx2
                if denom != 0:
                    t = ((e0[0] - prev[0]) * dy2 - (e0[1] - prev[1]) * dx2) / denom
                    output.append((prev[0] + t * dx1, prev[1] + t * dy1))
            if cur_in:
                output.append(cur)
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def bev_intersection(a, b):
    return polygon_area(clip_polygon(a.bev_corners(), b.bev_corners()))


def bev_iou(a, b):
    """IoU of the yaw-rotated footprints; z is ignored"""
    area_a = a.size[0] * a.size[1]
    area_b = b.size[0] * b.size[1]
    inter = bev_intersection(a, b)
    union = area_a + area_b - inter
    if union <= 0 or inter <= 0:
        return 0.0
    return float(min(1.0, inter / union))


def box3d_iou(a, b):
    """BEV intersection times vertical overlap over the union of volumes"""
    za = (a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2)
    zb = (b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2)
    overlap = max(0.0, min(za[1], zb[1]) - max(za[0], zb[0]))
    inter = bev_intersection(a, b) * overlap
    union = np.prod(a.size) + np.prod(b.size) - inter
    if union <= 0 or inter <= 0:
        return 0.0
    return float(min(1.0, inter / union))


IOU_FUNCTIONS = {"bev": bev_iou, "3d": box3d_iou}


def nms(boxes, iou_threshold, iou_fn=bev_iou):
    """Greedy suppression in descending score order (stable); boxes of different classes never suppress each other"""
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    kept = []
    for i in order:
        box = boxes[i]
        if all(k.class_id != box.class_id or iou_fn(k, box) < iou_threshold for k in kept):
            kept.append(box)
    return kept


class APResult:
    def __init__(self, ap, pr_curve, counts, undefined=False):
        self.ap = ap
        self.pr_curve = pr_curve
        self.counts = counts
        self.undefined = undefined

    def __repr__(self):
        return f"APResult(ap={self.ap:.4f}, points={len(self.pr_curve)}, undefined={self.undefined})"


def match_detections(dets_per_frame, gts_per_frame, iou=0.7, iou_fn=bev_iou):
    """
    Greedy matching: detections in descending score, each takes the highest-IoU unmatched gt of its frame.

    Returns:
        list: (score, is_true_positive) in processing order.
    """
    flat = [(det.score, f, k) for f, dets in enumerate(dets_per_frame) for k, det in enumerate(dets)]
    flat.sort(key=lambda item: -item[0])
    taken = [np.zeros(len(gts), dtype=bool) for gts in gts_per_frame]
    outcome = []
    for score, f, k in flat:
        det = dets_per_frame[f][k]
        best, best_iou = -1, iou
        for g, gt in enumerate(gts_per_frame[f]):
            if taken[f][g] or gt.class_id != det.class_id:
                continue
            overlap = iou_fn(det, gt)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = g, overlap
        if best >= 0:
            taken[f][best] = True
        outcome.append((score, best >= 0))
    return outcome


def interpolated_precision(recalls, precisions, n_recall=N_RECALL):
    """Precision at recall i / n_recall (i = 1..n_recall), each the max precision at any recall >= it"""
    recalls = np.asarray(recalls, dtype=np.float64)
    precisions = np.asarray(precisions, dtype=np.float64)
    levels = np.arange(1, n_recall + 1) / n_recall
    values = np.zeros(n_recall)
    for i, level in enumerate(levels):
        reached = recalls >= level
        if np.any(reached):
            values[i] = precisions[reached].max()
    return levels, values


def average_precision(dets_per_frame, gts_per_frame, iou=0.7, n_recall=N_RECALL, iou_fn=bev_iou, score_threshold=0.0):
    """
    AP_R40 over a set of frames.

    Returns:
        APResult: ap is NaN (undefined flag set) when there is no ground truth at all.
    """
    if len(dets_per_frame) != len(gts_per_frame):
        raise ShapeError(f"Shape Error: {len(dets_per_frame)} detection frames vs {len(gts_per_frame)} ground-truth frames")
    n_gt = sum(len(g) for g in gts_per_frame)
    outcome = match_detections(dets_per_frame, gts_per_frame, iou, iou_fn)
    tp_flags = np.array([tp for _, tp in outcome], dtype=bool)
    scores = np.array([s for s, _ in outcome], dtype=np.float64)
    operating = scores >= score_threshold
    counts = {
        "tp": int(np.sum(tp_flags & operating)),
        "fp": int(np.sum(~tp_flags & operating)),
        "fn": int(n_gt - np.sum(tp_flags & operating)),
    }
    if n_gt == 0:
        logger.warning("Eval Warning: no ground-truth boxes, AP is undefined")
        return APResult(math.nan, [], counts, undefined=True)
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recalls = tp / n_gt
    precisions = tp / np.maximum(tp + fp, 1)
    _, values = interpolated_precision(recalls, precisions, n_recall)
    pr_curve = [(float(r), float(p)) for r, p in zip(recalls, precisions)]
    return APResult(float(values.mean()), pr_curve, counts)


def _range_of(box):
    return math.hypot(box.center[0], box.center[1])


def distance_binned_ap(dets_per_frame, gts_per_frame, iou=0.7, bins=DISTANCE_BINS, iou_fn=bev_iou):
    """AP per BEV range bin (near/mid/far); boxes are binned by the range of their center"""
    results = {}
    names = BIN_NAMES if len(bins) == len(BIN_NAMES) + 1 else [f"{bins[i]:g}-{bins[i + 1]:g}m" for i in range(len(bins) - 1)]
    for name, low, high in zip(names, bins[:-1], bins[1:]):
        dets = [[d for d in frame if low <= _range_of(d) < high] for frame in dets_per_frame]
        gts = [[g for g in frame if low <= _range_of(g) < high] for frame in gts_per_frame]
        if sum(len(g) for g in gts) == 0:
            results[name] = math.nan
            continue
        results[name] = average_precision(dets, gts, iou=iou, iou_fn=iou_fn).ap
    return results


class EvalReport:
    def __init__(self):
        self.flow = {}
        self.ap = {}
        self.ap_3d = {}
        self.bins = {}
        self.pr_curve = []
        self.counts = {}

    def as_dict(self):
        return {
            "flow": self.flow,
            "ap": self.ap,
            "ap_3d": self.ap_3d,
            "distance_bins": self.bins,
            "counts": self.counts,
        }

    def lines(self):
        if self.flow:
            yield "Scene flow"
            for key, value in self.flow.items():
                yield f"  {key:<16} {value:.4f} m"
        if self.ap:
            yield "Detection (BEV AP_R40)"
            for class_id, value in self.ap.items():
                yield f"  class {class_id:<10} {value:.4f}"
            for class_id, value in self.ap_3d.items():
                yield f"  class {class_id} 3D{'':<7} {value:.4f}"
            for name, value in self.bins.items():
                yield f"  {name:<16} {value:.4f}"
            if self.counts:
                yield f"  TP {self.counts['tp']}  FP {self.counts['fp']}  FN {self.counts['fn']}"


def write_pr_curve_csv(pr_curve, path):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["recall", "precision"])
        for recall, precision in pr_curve:
            writer.writerow([f"{recall:.6f}", f"{precision:.6f}"])
