"""Config class for Flow Pretrain"""

import os
import sys

from modules import util
from modules.data import GeneratorConfig
from modules.losses import DISTANCES
from modules.losses import LossConfig
from modules.model import NEIGHBOR_SEARCH
from modules.model import BackboneConfig
from modules.model import DetectHeadConfig
from modules.model import FlowHeadConfig
from modules.model import ModelConfig
from modules.numeric import PRECISIONS
from modules.numeric import MlpSpec
from modules.numeric import Optimizer
from modules.numeric import dtype_for
from modules.util import YAML
from modules.util import Failed
from modules.util import check

logger = util.logger

STAGES = {
    "pretrain-flow": "Self-supervised scene flow pre-training",
    "train-detect": "Supervised detection fine-tuning",
    "alternate": "Four-stage alternating schedule",
    "eval-flow": "Scene flow evaluation",
    "eval-detect": "Detection evaluation",
}
IOU_KINDS = {"bev": "Bird's-eye-view IoU", "3d": "BEV intersection times vertical overlap"}
RESOLVED_FILE = "config.resolved.yml"
RUN_INFO_FILE = "run_info.json"


class Config:
    """Config class for Flow Pretrain"""

    def __init__(self, default_dir, args):
        logger.info("Locating config...")
        self.args = args
        self.default_dir = default_dir
        self.util = check(self)
        self.resolved = {}
        self.config_path = self._locate(args.get("config_file"))
        if self.config_path:
            logger.info(f"Using {self.config_path} as config")
            self.data = YAML(self.config_path).data
        else:
            logger.warning("Config Warning: no config file found, using built-in defaults")
            self.data = {}

        logger.separator("RUN COMMANDS", loglevel="DEBUG")
        logger.debug(f"    --config (FPT_CONFIG): {args.get('config_file')}")
        logger.debug(f"    --seed (FPT_SEED): {args.get('seed')}")
        logger.debug(f"    --out (FPT_OUT): {args.get('out_dir')}")
        logger.debug(f"    --loss-distance (FPT_LOSS_DISTANCE): {args.get('loss_distance')}")
        logger.debug(f"    --iou (FPT_IOU): {args.get('iou')}")
        logger.debug(f"    --log-level (FPT_LOG_LEVEL): {args.get('log_level')}")
        logger.separator(loglevel="DEBUG")

        self.run = {
            "stage": self.util.check_for_attribute(
                self.data, "stage", parent="run", test_list=STAGES, default=args.get("stage") or "pretrain-flow"
            ),
            "seed": self.util.check_for_attribute(self.data, "seed", parent="run", var_type="int", default=0),
            "out_dir": self.util.check_for_attribute(self.data, "out_dir", parent="run", default="runs/default"),
            "precision": self.util.check_for_attribute(
                self.data, "precision", parent="run", test_list={k: str(v.__name__) for k, v in PRECISIONS.items()},
                default="fast",
            ),
        }
        if args.get("seed") is not None:
            self.override("run", "seed", int(args["seed"]))
        if args.get("out_dir"):
            self.override("run", "out_dir", args["out_dir"])
        self.seed = self.run["seed"]
        self.out_dir = os.path.abspath(self.run["out_dir"])
        self.dtype = dtype_for(self.run["precision"])

        self.generator = self._generator()
        self.dataset = {
            "n_scenes": self.util.check_for_attribute(self.data, "n_scenes", parent="dataset", var_type="int", default=64, min_num=1),
            "val_fraction": self._fraction("dataset", "val_fraction", 0.2, allow_zero=True),
            "manifest": self.util.check_for_attribute(self.data, "manifest", parent="dataset", default_is_none=True),
            "cache_size": self.util.check_for_attribute(self.data, "cache_size", parent="dataset", var_type="int", default=256),
        }
        if self.dataset["manifest"] and not os.path.isdir(self.dataset["manifest"]):
            raise Failed(f"Config Error: dataset manifest directory {os.path.abspath(self.dataset['manifest'])} does not exist")

        self.model = self._model()
        self.loss = self._loss()
        self.optimizer = self._optimizer()
        self.training = self._training()
        self.alternate = {
            stage: self.util.check_for_attribute(
                self.data, stage, parent="alternate", var_type="int", default=self.training["steps"], min_num=1
            )
            for stage in ("flow_i", "detect_ii", "flow_iii", "detect_iv")
        }
        self.eval = self._eval()
        self.benchmark = {
            "fractions": self.util.check_for_attribute(
                self.data, "fractions", parent="benchmark", var_type="float_list", default=[0.05, 0.2]
            ),
            "seeds": self.util.check_for_attribute(
                self.data, "seeds", parent="benchmark", var_type="int_list", default=[0, 1, 2]
            ),
            "flow_steps": self.util.check_for_attribute(
                self.data, "flow_steps", parent="benchmark", var_type="int", default=self.training["steps"], min_num=1
            ),
        }
        for fraction in self.benchmark["fractions"]:
            if not 0.0 < fraction <= 1.0:
                raise Failed(f"Config Error: benchmark fractions must lie in (0, 1], got {fraction}")

    def _locate(self, config_file):
        presets = os.path.join(self.default_dir, "config", "presets")
        if config_file:
            candidates = [
                config_file,
                os.path.join(self.default_dir, config_file),
                os.path.join(self.default_dir, "config", config_file),
                os.path.join(presets, config_file),
                os.path.join(presets, f"{config_file}.yml"),
            ]
            for candidate in candidates:
                if os.path.isfile(candidate):
                    return os.path.abspath(candidate)
            raise Failed(f"Config Error: config not found at {os.path.abspath(config_file)}")
        default = os.path.join(self.default_dir, "config", "config.yml")
        return os.path.abspath(default) if os.path.isfile(default) else None

    def record(self, parent, attribute, value):
        """Store a resolved value for config.resolved.yml"""
        target = self.resolved if parent is None else self.resolved.setdefault(parent, {})
        target[attribute] = util.to_plain(value)

    def override(self, parent, attribute, value):
        getattr(self, parent)[attribute] = value
        self.record(parent, attribute, value)
        logger.info(f"Command line override: {parent}.{attribute} = {value}")

    def _fraction(self, parent, attribute, default, allow_zero=False):
        value = self.util.check_for_attribute(self.data, attribute, parent=parent, var_type="float", default=default)
        if value > 1.0 or (value == 0.0 and not allow_zero):
            raise Failed(f"Config Error: {parent} sub-attribute {attribute} must lie in {'[0' if allow_zero else '(0'}, 1], got {value}")
        return value

    def _pair(self, parent, attribute, default):
        value = self.util.check_for_attribute(
            self.data, attribute, parent=parent, var_type="float_list", default=list(default)
        )
        if len(value) != 2:
            raise Failed(f"Config Error: {parent} sub-attribute {attribute} must be a [low, high] pair, got {value}")
        return value

    def _mlp(self, parent, attribute, default):
        widths = self.util.check_for_attribute(
            self.data, attribute, parent=parent, var_type="int_list", default=list(default), min_num=1
        )
        return widths

    def _generator(self):
        p = "generator"
        defaults = GeneratorConfig()
        return GeneratorConfig(
            n_objects=[int(v) for v in self._pair(p, "n_objects", defaults.n_objects)],
            width=self._pair(p, "width", defaults.width),
            length=self._pair(p, "length", defaults.length),
            height=self._pair(p, "height", defaults.height),
            speed=self._pair(p, "speed", defaults.speed),
            curvature=self._pair(p, "curvature", defaults.curvature),
            yaw_range=self._pair(p, "yaw_range", defaults.yaw_range),
            background_points=self.util.check_for_attribute(self.data, "background_points", parent=p, var_type="int", default=1024),
            clutter_objects=self.util.check_for_attribute(self.data, "clutter_objects", parent=p, var_type="int", default=3),
            clutter_points=self.util.check_for_attribute(self.data, "clutter_points", parent=p, var_type="int", default=64),
            object_points=self.util.check_for_attribute(self.data, "object_points", parent=p, var_type="int", default=256),
            dropout_prob=self.util.check_for_attribute(self.data, "dropout_prob", parent=p, var_type="float", default=0.1),
            jitter_sigma=self.util.check_for_attribute(self.data, "jitter_sigma", parent=p, var_type="float", default=0.01),
            extent=self.util.check_for_attribute(self.data, "extent", parent=p, var_type="float", default=20.0),
            ego_motion=self.util.check_for_attribute(self.data, "ego_motion", parent=p, var_type="bool", default=False),
            ego_speed=self._pair(p, "ego_speed", defaults.ego_speed),
            num_classes=self.util.check_for_attribute(self.data, "num_classes", parent=p, var_type="int", default=1, min_num=1),
        )

    def _model(self):
        b, f, d = "backbone", "flow_head", "detect_head"
        backbone = BackboneConfig(
            n_sample=self.util.check_for_attribute(self.data, "n_sample", parent=b, var_type="int", default=2048, min_num=1),
            n_centroids=self.util.check_for_attribute(self.data, "n_centroids", parent=b, var_type="int", default=256, min_num=1),
            radius=self.util.check_for_attribute(self.data, "radius", parent=b, var_type="float", default=0.5),
            max_k=self.util.check_for_attribute(self.data, "max_k", parent=b, var_type="int", default=16, min_num=1),
            mlp=self._mlp(b, "mlp", (32, 64)),
            neighbor_search=self.util.check_for_attribute(
                self.data, "neighbor_search", parent=b, test_list=NEIGHBOR_SEARCH, default="brute"
            ),
        )
        fc_widths = self._mlp(f, "fc", (32, 3))
        flow_head = FlowHeadConfig(
            embed_k=self.util.check_for_attribute(self.data, "embed_k", parent=f, var_type="int", default=16, min_num=1),
            embed_mlp=self._mlp(f, "embed_mlp", (64, 64)),
            setconv_radius=self.util.check_for_attribute(self.data, "setconv_radius", parent=f, var_type="float", default=2.0),
            setconv_max_k=self.util.check_for_attribute(self.data, "setconv_max_k", parent=f, var_type="int", default=8, min_num=1),
            setconv_mlp=self._mlp(f, "setconv_mlp", (64,)),
            upconv_mlp=self._mlp(f, "upconv_mlp", (64, 64)),
            fc=MlpSpec.linear_output(fc_widths),
            fc_init_scale=self.util.check_for_attribute(self.data, "fc_init_scale", parent=f, var_type="float", default=0.1),
        )
        detect_head = DetectHeadConfig(
            bev_extent=self.util.check_for_attribute(self.data, "bev_extent", parent=d, var_type="float", default=20.0),
            bev_cells=self.util.check_for_attribute(self.data, "bev_cells", parent=d, var_type="int", default=64, min_num=1),
            conv_channels=self.util.check_for_attribute(self.data, "conv_channels", parent=d, var_type="int", default=32, min_num=1),
            reg_channels=self.util.check_for_attribute(self.data, "reg_channels", parent=d, var_type="int", default=8, min_num=8),
            num_classes=self.generator.num_classes,
        )
        return ModelConfig(backbone, flow_head, detect_head)

    def _loss(self):
        p = "loss"
        distance = self.util.check_for_attribute(self.data, "distance", parent=p, test_list=DISTANCES, default="squared")
        loss = LossConfig(
            distance=distance,
            focal_alpha=self.util.check_for_attribute(self.data, "focal_alpha", parent=p, var_type="float", default=2.0),
            focal_beta=self.util.check_for_attribute(self.data, "focal_beta", parent=p, var_type="float", default=4.0),
            huber_delta=self.util.check_for_attribute(self.data, "huber_delta", parent=p, var_type="float", default=1.0),
            w_hm=self.util.check_for_attribute(self.data, "w_hm", parent=p, var_type="float", default=1.0),
            w_reg=self.util.check_for_attribute(self.data, "w_reg", parent=p, var_type="float", default=2.0),
        )
        if self.args.get("loss_distance"):
            if self.args["loss_distance"] not in DISTANCES:
                raise Failed(f"Config Error: --loss-distance must be one of {list(DISTANCES)}")
            loss.distance = self.args["loss_distance"]
            self.record(p, "distance", loss.distance)
            logger.info(f"Command line override: loss.distance = {loss.distance}")
        return loss

    def _optimizer(self):
        p = "optimizer"
        settings = {
            "kind": self.util.check_for_attribute(self.data, "kind", parent=p, test_list=Optimizer.KINDS, default="adam"),
            "lr": self.util.check_for_attribute(self.data, "lr", parent=p, var_type="float", default=1e-3),
            "beta1": self.util.check_for_attribute(self.data, "beta1", parent=p, var_type="float", default=0.9),
            "beta2": self.util.check_for_attribute(self.data, "beta2", parent=p, var_type="float", default=0.999),
            "eps": self.util.check_for_attribute(self.data, "eps", parent=p, var_type="float", default=1e-8),
            "weight_decay": self.util.check_for_attribute(self.data, "weight_decay", parent=p, var_type="float", default=0.0),
        }
        if settings["lr"] <= 0:
            raise Failed(f"Config Error: optimizer sub-attribute lr must be > 0, got {settings['lr']}")
        return settings

    def _training(self):
        p = "training"
        training = {
            "steps": self.util.check_for_attribute(self.data, "steps", parent=p, var_type="int", default=500, min_num=1),
            "batch_size": self.util.check_for_attribute(self.data, "batch_size", parent=p, var_type="int", default=4, min_num=1),
            "eval_every": self.util.check_for_attribute(self.data, "eval_every", parent=p, var_type="int", default=50, min_num=1),
            "log_every": self.util.check_for_attribute(self.data, "log_every", parent=p, var_type="int", default=10, min_num=1),
            "early_stopping": self.util.check_for_attribute(
                self.data, "early_stopping", parent=p, var_type="bool", default=False
            ),
            "patience": self.util.check_for_attribute(self.data, "patience", parent=p, var_type="int", default=10, min_num=1),
            "time_limit": self.util.check_for_attribute(
                self.data, "time_limit", parent=p, var_type="time_parse", default=0
            ),
            "label_fraction": self._fraction(p, "label_fraction", 1.0),
            "prefetch": self.util.check_for_attribute(self.data, "prefetch", parent=p, var_type="int", default=2),
            "cache_size": self.util.check_for_attribute(self.data, "cache_size", parent=p, var_type="int", default=64),
            "init_checkpoint": self.util.check_for_attribute(self.data, "init_checkpoint", parent=p, default_is_none=True),
        }
        return training

    def _eval(self):
        p = "eval"
        settings = {
            "iou": self.util.check_for_attribute(self.data, "iou", parent=p, var_type="float", default=0.7),
            "iou_kind": self.util.check_for_attribute(self.data, "iou_kind", parent=p, test_list=IOU_KINDS, default="bev"),
            "peak_threshold": self.util.check_for_attribute(self.data, "peak_threshold", parent=p, var_type="float", default=0.1),
            "max_dets": self.util.check_for_attribute(self.data, "max_dets", parent=p, var_type="int", default=50, min_num=1),
            "nms_iou": self.util.check_for_attribute(self.data, "nms_iou", parent=p, var_type="float", default=0.5),
            "score_threshold": self.util.check_for_attribute(self.data, "score_threshold", parent=p, var_type="float", default=0.3),
            "distance_bins": self.util.check_for_attribute(
                self.data, "distance_bins", parent=p, var_type="float_list", default=[0.0, 10.0, 20.0, 1e9]
            ),
        }
        if self.args.get("iou") is not None:
            settings["iou"] = float(self.args["iou"])
            self.record(p, "iou", settings["iou"])
            logger.info(f"Command line override: eval.iou = {settings['iou']}")
        if not 0.0 < settings["iou"] <= 1.0:
            raise Failed(f"Config Error: eval iou must lie in (0, 1], got {settings['iou']}")
        return settings

    @property
    def digest(self):
        return util.config_hash(self.resolved)

    def write_resolved(self, out_dir=None):
        """Echo every resolved value (defaults included) into <out_dir>/config.resolved.yml"""
        out_dir = out_dir or self.out_dir
        os.makedirs(out_dir, exist_ok=True)
        resolved = YAML(path=os.path.join(out_dir, RESOLVED_FILE), create=True)
        resolved.data = util.to_plain(self.resolved)
        resolved.save()
        return resolved.path

    def write_run_info(self, version, command=None, out_dir=None):
        out_dir = out_dir or self.out_dir
        os.makedirs(out_dir, exist_ok=True)
        info = {
            "version": version,
            "git_commit": util.git_commit(self.default_dir),
            "seed": self.seed,
            "command": command if command is not None else " ".join(sys.argv),
            "config_path": self.config_path,
            "config_hash": self.digest,
        }
        util.save_json(info, os.path.join(out_dir, RUN_INFO_FILE))
        return info
