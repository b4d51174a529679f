import os

from modules import util
from modules.checkpoint import load_checkpoint
from modules.core.pretrain_flow import PretrainFlow
from modules.core.train_detect import TrainDetect
from modules.core.training import build_dataset
from modules.model import init_model_params
from modules.numeric import ADAM_SLOTS
from modules.numeric import namespace_slots
from modules.util import Failed

logger = util.logger

AUDIT_FILE = "stage_audit.json"
STAGES = (
    ("stage_i", "flow_i", "Flow pre-training from scratch"),
    ("stage_ii", "detect_ii", "Detection from the stage (i) backbone"),
    ("stage_iii", "flow_iii", "Flow with backbone from (ii) and flow head from (i)"),
    ("stage_iv", "detect_iv", "Detection with backbone from (iii) and detection head from (ii)"),
)


class Alternate:
    """
    Four-stage alternating schedule; every stage starts from checkpoints on disk.

    (i) flow from scratch, (ii) detection with g from (i), (iii) flow with g from (ii) and s from (i),
    (iv) detection with g from (iii) and h from (ii). The starting hash of every inherited namespace is
    compared with the checkpoint it came from and written to stage_audit.json; a mismatch aborts the run.
    Optimizer moments travel with their namespace, so an inherited head keeps its Adam state.
    """

    def __init__(self, config, dataset=None, out_dir=None, killer=None):
        self.config = config
        self.out_dir = out_dir or config.out_dir
        self.dataset = dataset or build_dataset(config)
        self.killer = killer or util.GracefulKiller()
        self.steps = config.alternate
        self.paths = {stage: os.path.join(self.out_dir, f"{stage}.fsck") for stage, _, _ in STAGES}
        self.audit = {}
        self.ap = {}
        self.optimizer_starts = {}
        self.params = None

        self.alternate()

    def _checkpoint(self, stage):
        path = self.paths[stage]
        if not os.path.isfile(path):
            raise Failed(f"Checkpoint Error: {stage} checkpoint {path} is missing, cannot continue the schedule")
        return path

    def _start(self, stage, sources, head):
        """
        Fresh parameters with the namespaces in `sources` ({namespace: source stage}) loaded and audited.

        Returns:
            (ModelParams, dict): the parameters and the optimizer state to start from. Each namespace brings
            its Adam moments and counts from the checkpoint it was loaded from; the step counter follows
            the source of `head`, or of the backbone when the head starts fresh.
        """
        params = init_model_params(self.config.model, self.config.seed, self.config.dtype)
        entries = {}
        optimizer = {"kind": self.config.optimizer["kind"], "step": 0, **{slot: {} for slot in ADAM_SLOTS}}
        for namespace, source in sources.items():
            checkpoint = load_checkpoint(self._checkpoint(source), params, [namespace])
            expected = checkpoint.digest([namespace])
            actual = params.digest([namespace])
            entries[namespace] = {"from": source, "checkpoint": expected, "start": actual, "match": expected == actual}
            logger.print_line(f"{stage}: {namespace}.* from {source} {actual[:16]} ({'ok' if expected == actual else 'MISMATCH'})", "INFO")
            if expected != actual:
                raise Failed(f"Audit Error: {stage} starts with {namespace}.* {actual[:16]}, {source} holds {expected[:16]}")
            saved = checkpoint.optimizer or {}
            if saved.get("kind", optimizer["kind"]) != optimizer["kind"]:
                logger.warning(f"{stage}: {source} was trained with {saved.get('kind')}, {namespace}.* optimizer slots start fresh")
                continue
            for slot, values in namespace_slots(saved, [namespace]).items():
                optimizer[slot].update(values)
            if namespace == (head if head in sources else "g"):
                optimizer["step"] = int(saved.get("step", 0))
        self.audit[stage] = entries
        self.optimizer_starts[stage] = optimizer
        return params, optimizer

    def _write_audit(self):
        os.makedirs(self.out_dir, exist_ok=True)
        util.save_json({"stages": self.audit, "ap": self.ap}, os.path.join(self.out_dir, AUDIT_FILE))

    def alternate(self):
        logger.separator("Alternating Training", space=False, border=False)
        for stage, key, title in STAGES:
            logger.print_line(f"{stage}: {title}, {self.steps[key]} steps", "INFO")

        first = PretrainFlow(
            self.config, stage="stage_i", steps=self.steps["flow_i"], dataset=self.dataset, out_dir=self.out_dir, killer=self.killer
        )
        self.audit["stage_i"] = {"g": {"start": first.params.digest(["g"])}, "s": {"start": first.params.digest(["s"])}}

        params, optimizer = self._start("stage_ii", {"g": "stage_i"}, head="h")
        second = TrainDetect(
            self.config, params, stage="stage_ii", steps=self.steps["detect_ii"], dataset=self.dataset, out_dir=self.out_dir,
            killer=self.killer, optimizer_state=optimizer,
        )
        self.ap["stage_ii"] = second.best_ap

        params, optimizer = self._start("stage_iii", {"g": "stage_ii", "s": "stage_i"}, head="s")
        PretrainFlow(
            self.config, params, stage="stage_iii", steps=self.steps["flow_iii"], dataset=self.dataset, out_dir=self.out_dir,
            killer=self.killer, optimizer_state=optimizer,
        )

        params, optimizer = self._start("stage_iv", {"g": "stage_iii", "h": "stage_ii"}, head="h")
        fourth = TrainDetect(
            self.config, params, stage="stage_iv", steps=self.steps["detect_iv"], dataset=self.dataset, out_dir=self.out_dir,
            killer=self.killer, optimizer_state=optimizer,
        )
        self.ap["stage_iv"] = fourth.best_ap
        self.params = fourth.params
        self._write_audit()

        logger.separator("Alternation Summary", space=False, border=False)
        logger.print_line(f"Validation AP after stage (ii): {self.ap['stage_ii']:.4f}", "INFO")
        logger.print_line(f"Validation AP after stage (iv): {self.ap['stage_iv']:.4f}", "INFO")
        logger.print_line(f"Final checkpoint: {self.paths['stage_iv']}", "INFO")

    @property
    def checkpoint_path(self):
        return self.paths["stage_iv"]
