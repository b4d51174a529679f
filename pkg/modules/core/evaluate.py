import math
import os

import numpy as np

from modules import util
from modules.checkpoint import load_checkpoint
from modules.core.training import build_dataset
from modules.evaluation import IOU_FUNCTIONS
from modules.evaluation import EvalReport
from modules.evaluation import average_precision
from modules.evaluation import bev_iou
from modules.evaluation import decode_detections
from modules.evaluation import distance_binned_ap
from modules.evaluation import epe_split
from modules.evaluation import flow_at_samples
from modules.evaluation import nms
from modules.evaluation import write_pr_curve_csv
from modules.model import backbone_forward
from modules.model import detect_head_forward
from modules.model import init_model_params
from modules.model import predict_flow

logger = util.logger

FLOW_REPORT = "eval_flow.json"
DETECT_REPORT = "eval_detect.json"
PR_CURVE = "pr_curve.csv"


def detect_scene(cloud, model_cfg, params, eval_cfg, seed=0, plan=None):
    """Decoded, NMS-filtered boxes of one frame"""
    encoding = backbone_forward(cloud, model_cfg.backbone, params, seed=seed, plan=plan)
    heatmap, regmap, _ = detect_head_forward(encoding, model_cfg.detect_head, params)
    boxes = decode_detections(heatmap, regmap, model_cfg.detect_head, eval_cfg["peak_threshold"], eval_cfg["max_dets"])
    return nms(boxes, eval_cfg["nms_iou"], bev_iou)


def class_ap(dets_per_frame, gts_per_frame, num_classes, eval_cfg, iou_fn=bev_iou):
    """APResult per class id"""
    results = {}
    for class_id in range(num_classes):
        dets = [[d for d in frame if d.class_id == class_id] for frame in dets_per_frame]
        gts = [[g for g in frame if g.class_id == class_id] for frame in gts_per_frame]
        results[class_id] = average_precision(
            dets, gts, iou=eval_cfg["iou"], iou_fn=iou_fn, score_threshold=eval_cfg["score_threshold"]
        )
    return results


def mean_ap(results):
    """Mean over classes with a defined AP; NaN when none is defined"""
    values = [r.ap for r in results.values() if not r.undefined]
    return float(np.mean(values)) if values else math.nan


def detections_on(dataset, ids, model_cfg, params, eval_cfg, seed=0, plans=None):
    dets_per_frame = []
    gts_per_frame = []
    for scene_id in ids:
        cloud, boxes = dataset.labeled(scene_id)
        plan = plans(scene_id) if plans else None
        dets_per_frame.append(detect_scene(cloud, model_cfg, params, eval_cfg, seed=seed, plan=plan))
        gts_per_frame.append(list(boxes))
    return dets_per_frame, gts_per_frame


def _eval_ids(dataset):
    if dataset.val_ids:
        return dataset.val_ids
    logger.warning("Eval Warning: dataset has no held-out scenes, evaluating on every scene")
    return dataset.ids


def load_params(config, checkpoint):
    params = init_model_params(config.model, config.seed, config.dtype)
    if checkpoint:
        loaded = load_checkpoint(checkpoint, params)
        logger.info(f"Evaluating {checkpoint} (stage {loaded.stage}, step {loaded.step})")
    else:
        logger.warning("Eval Warning: no checkpoint given, evaluating freshly initialised parameters")
    return params


class EvalFlow:
    """End-point error of predicted flow on held-out scenes, against the zero-flow baseline"""

    def __init__(self, config, checkpoint=None, params=None, dataset=None, out_dir=None):
        self.config = config
        self.out_dir = out_dir or config.out_dir
        self.dataset = dataset or build_dataset(config)
        self.params = params if params is not None else load_params(config, checkpoint)
        self.report = EvalReport()

        self.evaluate()

    def evaluate(self):
        logger.separator("Scene Flow Evaluation", space=False, border=False)
        predicted = []
        truth = []
        ids = _eval_ids(self.dataset)
        for scene_id in ids:
            sample = self.dataset.scene(scene_id)
            sampled_xyz, flow = predict_flow(sample.frame_t, sample.frame_t1, self.config.model, self.params, seed=self.config.seed)
            predicted.append(np.asarray(flow, dtype=np.float64))
            truth.append(flow_at_samples(sample.frame_t.xyz, sample.gt_flow, sampled_xyz))
        self.report.flow = epe_split(np.concatenate(predicted), np.concatenate(truth))
        for line in self.report.lines():
            logger.print_line(line, "INFO")
        ratio = self.report.flow["epe"] / self.report.flow["epe_zero_flow"] if self.report.flow["epe_zero_flow"] else math.nan
        logger.print_line(f"EPE / zero-flow EPE: {ratio:.3f}", "INFO")
        self.report.flow["epe_ratio"] = ratio
        self.report.flow["n_scenes"] = len(ids)
        os.makedirs(self.out_dir, exist_ok=True)
        util.save_json(util.to_plain(self.report.as_dict()), os.path.join(self.out_dir, FLOW_REPORT))


class EvalDetect:
    """BEV and 3D AP_R40 per class, distance-binned AP and the PR curve of class 0"""

    def __init__(self, config, checkpoint=None, params=None, dataset=None, out_dir=None):
        self.config = config
        self.eval_cfg = config.eval
        self.out_dir = out_dir or config.out_dir
        self.dataset = dataset or build_dataset(config)
        self.params = params if params is not None else load_params(config, checkpoint)
        self.report = EvalReport()
        self.results = {}

        self.evaluate()

    @property
    def ap(self):
        return mean_ap(self.results)

    def evaluate(self):
        logger.separator(f"Detection Evaluation (IoU {self.eval_cfg['iou']})", space=False, border=False)
        num_classes = self.config.model.detect_head.num_classes
        dets, gts = detections_on(self.dataset, _eval_ids(self.dataset), self.config.model, self.params, self.eval_cfg, self.config.seed)
        self.results = class_ap(dets, gts, num_classes, self.eval_cfg, IOU_FUNCTIONS[self.eval_cfg["iou_kind"]])
        bev = class_ap(dets, gts, num_classes, self.eval_cfg, IOU_FUNCTIONS["bev"])
        box3d = class_ap(dets, gts, num_classes, self.eval_cfg, IOU_FUNCTIONS["3d"])
        self.report.ap = {class_id: r.ap for class_id, r in bev.items()}
        self.report.ap_3d = {class_id: r.ap for class_id, r in box3d.items()}
        self.report.bins = distance_binned_ap(dets, gts, iou=self.eval_cfg["iou"], bins=self.eval_cfg["distance_bins"])
        self.report.pr_curve = bev[0].pr_curve
        self.report.counts = bev[0].counts
        for line in self.report.lines():
            logger.print_line(line, "INFO")
        os.makedirs(self.out_dir, exist_ok=True)
        write_pr_curve_csv(self.report.pr_curve, os.path.join(self.out_dir, PR_CURVE))
        util.save_json(util.to_plain(self.report.as_dict()), os.path.join(self.out_dir, DETECT_REPORT))
