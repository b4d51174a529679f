import math
import os

from modules import util
from modules.checkpoint import MetricsLog
from modules.checkpoint import load_checkpoint
from modules.checkpoint import save_checkpoint
from modules.core.training import Prefetcher
from modules.core.training import StageClock
from modules.core.training import batch_schedule
from modules.core.training import build_dataset
from modules.core.training import guard_finite
from modules.core.training import mean_gradients
from modules.core.training import seeded_rng
from modules.data import FramePair
from modules.model import flow_loss_and_grad
from modules.model import init_model_params
from modules.model import plan_sampling
from modules.numeric import Optimizer
from modules.util import Failed
from modules.util import NumericError

logger = util.logger

FLOW_NAMESPACES = ("g", "s")
METRICS = ("nn_loss", "cycle_loss", "total", "val_total")


class PretrainFlow:
    """
    Self-supervised scene flow pre-training of the backbone (g.*) and flow head (s.*).

    Only FramePair objects reach the loss: the unlabeled view carries no boxes or flow.
    The best-validation parameters are saved as <out_dir>/<stage>.fsck and left in `self.params`.
    """

    def __init__(
        self, config, params=None, stage="pretrain-flow", steps=None, dataset=None, out_dir=None, seed=None, killer=None,
        optimizer_state=None,
    ):
        self.config = config
        self.stage = stage
        self.seed = config.seed if seed is None else int(seed)
        self.model_cfg = config.model
        self.loss_cfg = config.loss
        self.training = config.training
        self.steps = int(steps or self.training["steps"])
        self.out_dir = out_dir or config.out_dir
        self.dataset = dataset or build_dataset(config, seed=self.seed)
        self.killer = killer or util.GracefulKiller()
        self.params = params if params is not None else init_model_params(self.model_cfg, self.seed, config.dtype)
        self.optimizer = Optimizer.from_config(config.optimizer)
        self.optimizer.load_state_dict(optimizer_state)
        self.checkpoint_path = os.path.join(self.out_dir, f"{stage}.fsck")
        self.metrics = MetricsLog(os.path.join(self.out_dir, f"{stage}.metrics.csv"), METRICS)
        self.history = []
        self.stats = {"steps": 0, "best_val": math.inf, "best_step": 0, "stopped": "steps"}
        self.clock = StageClock(self.training["time_limit"])

        self.pretrain()

    def _prepare(self, scene_id):
        pair = self.dataset.pair(scene_id)
        if not isinstance(pair, FramePair):
            raise Failed(f"Dataset Error: flow pre-training expects unlabeled frame pairs, got {type(pair).__name__}")
        cfg = self.model_cfg.backbone
        plans = (plan_sampling(pair.frame_t, cfg, self.seed), plan_sampling(pair.frame_t1, cfg, self.seed))
        return pair, plans

    def _state(self, step, rng):
        return {
            "step": step,
            "config_hash": self.config.digest,
            "optimizer": self.optimizer.state_dict(),
            "rng": rng,
            "stage": self.stage,
        }

    def validation_loss(self, loader):
        ids = self.dataset.val_ids
        if not ids:
            return math.nan
        total = 0.0
        for scene_id in ids:
            pair, plans = loader(scene_id)
            report, _ = flow_loss_and_grad(
                pair.frame_t, pair.frame_t1, self.model_cfg, self.params, self.loss_cfg, plans=plans, backward=False
            )
            total += report.total
        return total / len(ids)

    def pretrain(self):
        logger.separator(f"Flow Pre-training ({self.stage})", space=False, border=False)
        train_ids = self.dataset.train_ids
        if not train_ids:
            raise Failed(f"Dataset Error: {self.stage} has no training scenes")
        batch_size = self.training["batch_size"]
        names = self.params.names(FLOW_NAMESPACES)
        rng = seeded_rng(self.seed, self.stage)
        schedule = batch_schedule(train_ids, self.steps, batch_size, rng)
        loader = Prefetcher(self._prepare, self.training["prefetch"], self.training["cache_size"])
        logger.print_line(
            f"{len(train_ids)} training / {len(self.dataset.val_ids)} validation scenes, {self.steps} steps of {batch_size}, "
            f"{self.params.num_values(FLOW_NAMESPACES)} trainable values",
            "INFO",
        )
        last_good = self.params.copy()
        stale = 0
        saved = False
        flat_ids = [scene_id for batch in schedule for scene_id in batch]
        stream = loader.iterate(flat_ids)
        for step, batch in enumerate(schedule, start=1):
            self.params.zero_grad(FLOW_NAMESPACES)
            nn_loss = cycle_loss = 0.0
            for _ in batch:
                pair, plans = next(stream)
                try:
                    report, _ = flow_loss_and_grad(
                        pair.frame_t, pair.frame_t1, self.model_cfg, self.params, self.loss_cfg, plans=plans
                    )
                except NumericError as e:
                    logger.debug(e)
                    nn_loss = math.nan
                    continue
                nn_loss += report.nn_loss / batch_size
                cycle_loss += report.cycle_loss / batch_size
            total = nn_loss + cycle_loss
            guard_finite(total, self.stage, step, last_good, self.out_dir, self._state(step - 1, rng))
            last_good = self.params.copy()
            mean_gradients(self.params, names, batch_size)
            try:
                self.optimizer.step(self.params, names)
            except NumericError as e:
                logger.debug(e)
                guard_finite(math.nan, self.stage, step, last_good, self.out_dir, self._state(step - 1, rng))
            self.stats["steps"] = step
            row = {"nn_loss": nn_loss, "cycle_loss": cycle_loss, "total": total}

            last = step == self.steps
            if step % self.training["eval_every"] == 0 or last:
                val = self.validation_loss(loader)
                row["val_total"] = val
                score = total if math.isnan(val) else val
                if score < self.stats["best_val"]:
                    self.stats.update(best_val=score, best_step=step)
                    save_checkpoint(self.params, self._state(step, rng), self.checkpoint_path)
                    saved = True
                    stale = 0
                else:
                    stale += 1
                logger.print_line(f"{self.stage} step {step}: validation loss {val:.6f} (best {self.stats['best_val']:.6f})", "INFO")
            if step % self.training["log_every"] == 0 or step == 1 or last:
                logger.print_line(
                    f"{self.stage} step {step}/{self.steps}: nn {nn_loss:.6f}  cycle {cycle_loss:.6f}  total {total:.6f}", "INFO"
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
            f"best checkpoint from step {self.stats['best_step']} -> {self.checkpoint_path}",
            "INFO",
        )
