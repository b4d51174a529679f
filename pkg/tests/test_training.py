import math
import os
import threading
import time

import numpy as np
import pytest

from modules.checkpoint import read_checkpoint
from modules.core.grad_suite import tiny_model_config
from modules.core.training import Prefetcher
from modules.core.training import StageClock
from modules.core.training import batch_schedule
from modules.core.training import build_dataset
from modules.core.training import guard_finite
from modules.core.training import mean_gradients
from modules.core.training import seeded_rng
from modules.data import ArchiveDataset
from modules.data import GeneratorConfig
from modules.data import SyntheticDataset
from modules.model import init_model_params
from modules.util import Diverged


class TestPrefetcher:
    @pytest.mark.parametrize("window", [0, 1, 2, 4])
    def test_request_order(self, window):
        def slow_square(key):
            time.sleep(0.001 * (5 - key % 5))
            return key * key

        assert list(Prefetcher(slow_square, window).iterate(range(12))) == [k * k for k in range(12)]

    def test_window_zero_runs_inline(self):
        threads = set()

        def prepare(key):
            threads.add(threading.get_ident())
            return key

        list(Prefetcher(prepare, 0).iterate(range(5)))
        assert threads == {threading.get_ident()}

    def test_prepares_each_key_once(self):
        calls = []

        def prepare(key):
            calls.append(key)
            return key

        prefetcher = Prefetcher(prepare, 2)
        assert list(prefetcher.iterate([1, 2, 1, 2, 3])) == [1, 2, 1, 2, 3]
        assert prefetcher(3) == 3
        assert sorted(set(calls)) == [1, 2, 3]

    @pytest.mark.parametrize("window", [0, 2])
    def test_cache_stays_bounded(self, window):
        prefetcher = Prefetcher(lambda k: k, window, cache_size=4)
        assert list(prefetcher.iterate(range(50))) == list(range(50))
        assert len(prefetcher._cache) == 4

    def test_evicted_key_prepared_again(self):
        calls = []

        def prepare(key):
            calls.append(key)
            return key

        prefetcher = Prefetcher(prepare, 0, cache_size=2)
        list(prefetcher.iterate([1, 2, 3, 1]))
        assert calls == [1, 2, 3, 1]

    def test_empty(self):
        assert list(Prefetcher(lambda k: k, 2).iterate([])) == []


class TestSchedule:
    def test_deterministic(self):
        a = batch_schedule(range(10), 5, 3, np.random.default_rng(4))
        b = batch_schedule(range(10), 5, 3, np.random.default_rng(4))
        assert a == b
        assert len(a) == 5 and all(len(batch) == 3 for batch in a)

    def test_distinct_within_batch_when_possible(self):
        for batch in batch_schedule(range(6), 20, 4, np.random.default_rng(0)):
            assert len(set(batch)) == 4

    def test_small_dataset_draws_with_replacement(self):
        for batch in batch_schedule([7], 3, 2, np.random.default_rng(0)):
            assert batch == [7, 7]

    def test_stage_streams_differ(self):
        assert seeded_rng(0, "pretrain_flow").random() != seeded_rng(0, "train_detect").random()
        assert seeded_rng(3, "flow").random() == seeded_rng(3, "flow").random()


class TestDataset:
    def test_synthetic_by_default(self, smoke_config):
        dataset = build_dataset(smoke_config)
        assert isinstance(dataset, SyntheticDataset)
        assert dataset.n_scenes == 4
        assert dataset.val_ids == [3]

    def test_seed_override(self, smoke_config):
        assert build_dataset(smoke_config, seed=9).base_seed == 9

    def test_manifest_selects_archive(self, write_config, tmp_path):
        from modules.data import save_scene
        from modules.data import scene_file
        from modules.data import write_manifest

        scenes = tmp_path / "scenes"
        synthetic = SyntheticDataset(GeneratorConfig(background_points=64, object_points=16), 2)
        os.makedirs(scenes)
        for scene_id in synthetic.ids:
            save_scene(synthetic.scene(scene_id), str(scenes / scene_file(scene_id)))
        write_manifest(str(scenes), synthetic.ids, synthetic.cfg.digest, 0)
        config = write_config(f"dataset:\n  manifest: {scenes}\n")
        assert isinstance(build_dataset(config), ArchiveDataset)


class TestDivergence:
    def test_finite_passes(self, tmp_path):
        guard_finite(1.5, "flow", 3, None, str(tmp_path), {})

    def test_nan_saves_last_good(self, tmp_path):
        params = init_model_params(tiny_model_config(), seed=0)
        with pytest.raises(Diverged, match="step 7"):
            guard_finite(math.nan, "pretrain_flow", 7, params, str(tmp_path), {"step": 6, "config_hash": "h"})
        path = tmp_path / "pretrain_flow.last_good.fsck"
        assert path.exists()
        checkpoint = read_checkpoint(str(path))
        assert checkpoint.step == 6
        assert checkpoint.meta == {"diverged_at": 7}
        assert checkpoint.digest() == params.digest()

    def test_inf_without_snapshot(self, tmp_path):
        with pytest.raises(Diverged):
            guard_finite(math.inf, "train_detect", 1, None, str(tmp_path), {})
        assert not os.listdir(tmp_path)


class TestHelpers:
    def test_mean_gradients(self):
        params = init_model_params(tiny_model_config(), seed=0, dtype=np.float64)
        name = params.names(["g"])[0]
        params.accumulate(name, np.full_like(params.value(name), 4.0))
        mean_gradients(params, [name], 4)
        np.testing.assert_array_equal(params.grad(name), np.ones_like(params.value(name)))

    def test_clock_limit(self):
        assert not StageClock(0).expired()
        clock = StageClock(1)
        clock.start -= 2
        assert clock.expired()
        assert "second" in clock.pretty()
