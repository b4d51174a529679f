import csv
import math
import os

import numpy as np

from modules import util
from modules.core.pretrain_flow import PretrainFlow
from modules.core.train_detect import TrainDetect
from modules.core.train_detect import backbone_initialised_params
from modules.core.training import build_dataset

logger = util.logger

RESULTS_FILE = "benchmark.csv"
ARMS = ("random", "flow")


class Benchmark:
    """
    Low-data protocol: for every seed, pre-train flow once, then train detection at each label
    fraction from random init and from the flow-pretrained backbone with equal step budgets.
    """

    def __init__(self, config, out_dir=None, killer=None):
        self.config = config
        self.settings = config.benchmark
        self.out_dir = out_dir or config.out_dir
        self.killer = killer or util.GracefulKiller()
        self.rows = []

        self.benchmark()

    def benchmark(self):
        logger.separator("Low-data Benchmark", space=False, border=False)
        fractions = self.settings["fractions"]
        seeds = self.settings["seeds"]
        logger.print_line(f"Fractions {fractions} x seeds {seeds} x arms {list(ARMS)}", "INFO")
        for seed in seeds:
            seed_dir = os.path.join(self.out_dir, f"seed_{seed}")
            dataset = build_dataset(self.config, seed=seed)
            flow = PretrainFlow(
                self.config, stage="pretrain-flow", steps=self.settings["flow_steps"], dataset=dataset, out_dir=seed_dir,
                seed=seed, killer=self.killer,
            )
            for fraction in fractions:
                for arm in ARMS:
                    checkpoint = flow.checkpoint_path if arm == "flow" else None
                    run_dir = os.path.join(seed_dir, f"{arm}_{fraction:g}")
                    detect = TrainDetect(
                        self.config,
                        backbone_initialised_params(self.config, checkpoint, seed),
                        stage="train-detect",
                        dataset=dataset,
                        out_dir=run_dir,
                        seed=seed,
                        label_fraction=fraction,
                        killer=self.killer,
                    )
                    self.rows.append(
                        {"seed": seed, "fraction": fraction, "arm": arm, "ap": detect.best_ap, "steps": detect.stats["steps"]}
                    )
                    logger.print_line(f"seed {seed} fraction {fraction:g} {arm:<6} AP {detect.best_ap:.4f}", "INFO")
        self.write()
        self.summary()

    def write(self):
        os.makedirs(self.out_dir, exist_ok=True)
        with open(os.path.join(self.out_dir, RESULTS_FILE), "w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=["seed", "fraction", "arm", "ap", "steps"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow({**row, "ap": f"{row['ap']:.6f}"})

    def gaps(self):
        """Mean AP per (fraction, arm) and the flow minus random gap per fraction"""
        result = {}
        for fraction in self.settings["fractions"]:
            means = {}
            for arm in ARMS:
                values = [r["ap"] for r in self.rows if r["fraction"] == fraction and r["arm"] == arm and not math.isnan(r["ap"])]
                means[arm] = float(np.mean(values)) if values else math.nan
            result[fraction] = {**means, "gap": means["flow"] - means["random"]}
        return result

    def summary(self):
        logger.separator("Benchmark Summary", space=False, border=False)
        for fraction, entry in self.gaps().items():
            logger.print_line(
                f"fraction {fraction:<6g} random {entry['random']:.4f}  flow {entry['flow']:.4f}  gap {entry['gap']:+.4f}", "INFO"
            )
