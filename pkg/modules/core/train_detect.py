import math
import os

from modules import util
from modules.checkpoint import MetricsLog
from modules.checkpoint import load_checkpoint
from modules.checkpoint import save_checkpoint
from modules.core.evaluate import class_ap
from modules.core.evaluate import detections_on
from modules.core.evaluate import mean_ap
from modules.core.training import Prefetcher
from modules.core.training import StageClock
from modules.core.training import batch_schedule
from modules.core.training import build_dataset
from modules.core.training import guard_finite
from modules.core.training import mean_gradients
from modules.core.training import seeded_rng
from modules.data import subset_split
from modules.evaluation import IOU_FUNCTIONS
from modules.losses import make_detection_targets
from modules.model import detection_loss_and_grad
from modules.model import init_model_params
from modules.model import plan_sampling
from modules.numeric import Optimizer
from modules.util import Failed
from modules.util import NumericError

logger = util.logger

DETECT_NAMESPACES = ("g", "h")
METRICS = ("heatmap", "regression", "total", "val_ap")


def backbone_initialised_params(config, checkpoint=None, seed=None):
    """Fresh parameters with only g.* taken from `checkpoint`; h.* and s.* stay at their fresh init"""
    params = init_model_params(config.model, config.seed if seed is None else seed, config.dtype)
    if checkpoint:
        loaded = load_checkpoint(checkpoint, params, ["g"])
        logger.info(f"Backbone initialised from {checkpoint} (stage {loaded.stage}, step {loaded.step})")
    return params


class TrainDetect:
    """
    Supervised detection training of the backbone (g.*) and detection head (h.*) on the labeled subset.

    Without `params` the model is built fresh and, when training.init_checkpoint is set, only the
    backbone is loaded from it. The best-validation-AP parameters end in <out_dir>/<stage>.fsck.
    """

    def __init__(
        self,
        config,
        params=None,
        stage="train-detect",
        steps=None,
        dataset=None,
        out_dir=None,
        seed=None,
        label_fraction=None,
        killer=None,
        optimizer_state=None,
    ):
        self.config = config
        self.stage = stage
        self.seed = config.seed if seed is None else int(seed)
        self.model_cfg = config.model
        self.loss_cfg = config.loss
        self.eval_cfg = config.eval
        self.training = config.training
        self.steps = int(steps or self.training["steps"])
        self.out_dir = out_dir or config.out_dir
        self.label_fraction = self.training["label_fraction"] if label_fraction is None else float(label_fraction)
        self.dataset = dataset or build_dataset(config)
        self.killer = killer or util.GracefulKiller()
        if params is None:
            params = backbone_initialised_params(config, self.training["init_checkpoint"], self.seed)
        self.params = params
        self.optimizer = Optimizer.from_config(config.optimizer)
        self.optimizer.load_state_dict(optimizer_state)
        self.iou_fn = IOU_FUNCTIONS[self.eval_cfg["iou_kind"]]
        self.checkpoint_path = os.path.join(self.out_dir, f"{stage}.fsck")
        self.metrics = MetricsLog(os.path.join(self.out_dir, f"{stage}.metrics.csv"), METRICS)
        self.labeled_ids = []
        self.history = []
        self.stats = {"steps": 0, "best_ap": -math.inf, "best_step": 0, "best_loss": math.inf, "stopped": "steps"}
        self.clock = StageClock(self.training["time_limit"])

        self.train()

    @property
    def best_ap(self):
        return self.stats["best_ap"] if math.isfinite(self.stats["best_ap"]) else math.nan

    def _prepare(self, scene_id):
        cloud, boxes = self.dataset.labeled(scene_id)
        plan = plan_sampling(cloud, self.model_cfg.backbone, self.seed)
        targets = make_detection_targets(boxes, self.model_cfg.detect_head)
        return cloud, boxes, plan, targets

    def _plan(self, loader):
        return lambda scene_id: loader(scene_id)[2]

    def _state(self, step, rng, meta=None):
        return {
            "step": step,
            "config_hash": self.config.digest,
            "optimizer": self.optimizer.state_dict(),
            "rng": rng,
            "stage": self.stage,
            "meta": meta or {},
        }

    def validation_ap(self, loader):
        ids = self.dataset.val_ids
        if not ids:
            return math.nan
        dets, gts = detections_on(self.dataset, ids, self.model_cfg, self.params, self.eval_cfg, plans=self._plan(loader))
        return mean_ap(class_ap(dets, gts, self.model_cfg.detect_head.num_classes, self.eval_cfg, self.iou_fn))

    def _improved(self, val_ap, total):
        """Higher AP wins; loss decides while AP is undefined"""
        if not math.isnan(val_ap):
            return val_ap > self.stats["best_ap"]
        return not math.isfinite(self.stats["best_ap"]) and total < self.stats["best_loss"]

    def train(self):
        logger.separator(f"Detection Training ({self.stage})", space=False, border=False)
        if not self.dataset.train_ids:
            raise Failed(f"Dataset Error: {self.stage} has no training scenes")
        self.labeled_ids = subset_split(self.dataset.train_ids, self.label_fraction, self.seed)
        batch_size = self.training["batch_size"]
        names = self.params.names(DETECT_NAMESPACES)
        rng = seeded_rng(self.seed, self.stage)
        schedule = batch_schedule(self.labeled_ids, self.steps, batch_size, rng)
        loader = Prefetcher(self._prepare, self.training["prefetch"], self.training["cache_size"])
        logger.print_line(
            f"{len(self.labeled_ids)} labeled of {len(self.dataset.train_ids)} training scenes (fraction {self.label_fraction:g}), "
            f"{len(self.dataset.val_ids)} validation, {self.steps} steps of {batch_size}",
            "INFO",
        )
        last_good = self.params.copy()
        stale = 0
        saved = False
        stream = loader.iterate([scene_id for batch in schedule for scene_id in batch])
        for step, batch in enumerate(schedule, start=1):
            self.params.zero_grad(DETECT_NAMESPACES)
            hm_loss = reg_loss = total = 0.0
            for _ in batch:
                cloud, boxes, plan, targets = next(stream)
                try:
                    report, _ = detection_loss_and_grad(
                        cloud, boxes, self.model_cfg, self.params, self.loss_cfg, plan=plan, targets=targets
                    )
                except NumericError as e:
                    logger.debug(e)
                    total = math.nan
                    continue
                hm_loss += report.heatmap / batch_size
                reg_loss += report.regression / batch_size
                total += report.total / batch_size
            guard_finite(total, self.stage, step, last_good, self.out_dir, self._state(step - 1, rng))
            last_good = self.params.copy()
            mean_gradients(self.params, names, batch_size)
            try:
                self.optimizer.step(self.params, names)
            except NumericError as e:
                logger.debug(e)
                guard_finite(math.nan, self.stage, step, last_good, self.out_dir, self._state(step - 1, rng))
            self.stats["steps"] = step
            row = {"heatmap": hm_loss, "regression": reg_loss, "total": total}

            last = step == self.steps
            if step % self.training["eval_every"] == 0 or last:
                val_ap = self.validation_ap(loader)
                row["val_ap"] = val_ap
                if self._improved(val_ap, total):
                    if not math.isnan(val_ap):
                        self.stats.update(best_ap=val_ap)
                    self.stats.update(best_step=step, best_loss=total)
                    save_checkpoint(self.params, self._state(step, rng, {"val_ap": val_ap}), self.checkpoint_path)
                    saved = True
                    stale = 0
                else:
                    stale += 1
                logger.print_line(f"{self.stage} step {step}: validation AP {val_ap:.4f} (best {self.best_ap:.4f})", "INFO")
            if step % self.training["log_every"] == 0 or step == 1 or last:
                logger.print_line(
                    f"{self.stage} step {step}/{self.steps}: heatmap {hm_loss:.6f}  regression {reg_loss:.6f}  total {total:.6f}",
                    "INFO",
                )
            else:
                logger.ghost(f"{self.stage} step {step}/{self.steps}: total {total:.6f}")
            self.metrics.append(step, self.stage, self.clock.elapsed, **row)
            self.history.append(row)

            if self.training["early_stopping"] and stale >= self.training["patience"]:
                self.stats["stopped"] = "early stopping"
                break
            if self.clock.expired():
                self.stats["stopped"] = "time limit"
                break
            if self.killer.kill_now:
                self.stats["stopped"] = "terminated"
                break
        stream.close()
        logger.exorcise()
        if not saved:
            save_checkpoint(self.params, self._state(self.stats["steps"], rng), self.checkpoint_path)
        load_checkpoint(self.checkpoint_path, self.params)
        logger.print_line(
            f"{self.stage} finished after {self.stats['steps']} steps ({self.stats['stopped']}) in {self.clock.pretty()}; "
            f"best AP {self.best_ap:.4f} at step {self.stats['best_step']} -> {self.checkpoint_path}",
            "INFO",
        )
