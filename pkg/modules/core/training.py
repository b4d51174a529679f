"""Pieces shared by the training stages: datasets, prefetching, clocks and divergence handling."""

import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import humanize
import numpy as np

from modules import util
from modules.checkpoint import save_checkpoint
from modules.data import ArchiveDataset
from modules.data import SyntheticDataset
from modules.util import Diverged

logger = util.logger


def build_dataset(config, seed=None):
    """Scene archive when the config names a manifest directory, otherwise synthetic scenes"""
    if config.dataset["manifest"]:
        return ArchiveDataset(
            config.dataset["manifest"], val_fraction=config.dataset["val_fraction"], cache_size=config.dataset["cache_size"]
        )
    return SyntheticDataset(
        config.generator,
        config.dataset["n_scenes"],
        base_seed=config.seed if seed is None else seed,
        val_fraction=config.dataset["val_fraction"],
        cache_size=config.dataset["cache_size"],
    )


def batch_schedule(ids, steps, batch_size, rng):
    """Scene ids of every step, drawn up front so prefetching can run ahead of the loop"""
    ids = list(ids)
    replace = len(ids) < batch_size
    return [[ids[i] for i in rng.choice(len(ids), size=batch_size, replace=replace)] for _ in range(steps)]


class Prefetcher:
    """
    Prepare items ahead of the consumer with a bounded window of worker threads.

    Items come back strictly in request order; window 0 prepares inline. Prepared items are
    kept in a least-recently-used cache of `cache_size` entries so repeated validation passes
    reuse them without holding every scene of the run.
    """

    def __init__(self, prepare, window=2, cache_size=64):
        self.prepare = prepare
        self.window = max(0, int(window))
        self._lock = threading.Lock()
        self._cache = util.BoundedCache(cache_size)

    def _get(self, key):
        with self._lock:
            if key in self._cache:
                return self._cache.get(key)
        value = self.prepare(key)
        with self._lock:
            return self._cache.put(key, value)

    def iterate(self, keys):
        keys = list(keys)
        if self.window == 0:
            for key in keys:
                yield self._get(key)
            return
        with ThreadPoolExecutor(max_workers=self.window) as executor:
            pending = []
            ahead = iter(keys)
            for key in ahead:
                pending.append(executor.submit(self._get, key))
                if len(pending) > self.window:
                    break
            while pending:
                future = pending.pop(0)
                next_key = next(ahead, None)
                if next_key is not None:
                    pending.append(executor.submit(self._get, next_key))
                yield future.result()

    def __call__(self, key):
        return self._get(key)


class StageClock:
    """Wall clock of one stage with an optional time limit in seconds (0 = none)"""

    def __init__(self, time_limit=0):
        self.start = time.time()
        self.time_limit = time_limit or 0

    @property
    def elapsed(self):
        return time.time() - self.start

    def expired(self):
        return bool(self.time_limit) and self.elapsed >= self.time_limit

    def pretty(self):
        return humanize.precisedelta(self.elapsed, minimum_unit="seconds", format="%0.1f")


def mean_gradients(params, names, batch_size):
    if batch_size > 1:
        for name in names:
            params.grad(name)[...] /= batch_size


def guard_finite(value, stage, step, last_good, out_dir, state):
    """Raise Diverged after saving the last good parameters as <stage>.last_good.fsck"""
    if math.isfinite(value):
        return
    path = os.path.join(out_dir, f"{stage}.last_good.fsck")
    if last_good is not None:
        save_checkpoint(last_good, {**state, "stage": stage, "meta": {"diverged_at": step}}, path)
        logger.error(f"{stage}: loss became {value} at step {step}; last good parameters saved to {path}")
    raise Diverged(f"Numeric Error: {stage} diverged at step {step} (loss {value})")


def seeded_rng(seed, stage):
    return np.random.default_rng([int(seed), sum(map(ord, stage))])
