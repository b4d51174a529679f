import os

import numpy as np
import pytest

from modules.checkpoint import MAGIC
from modules.checkpoint import MetricsLog
from modules.checkpoint import load_checkpoint
from modules.checkpoint import read_checkpoint
from modules.checkpoint import save_checkpoint
from modules.core.grad_suite import tiny_model_config
from modules.model import BackboneConfig
from modules.model import ModelConfig
from modules.model import init_model_params
from modules.numeric import Optimizer
from modules.util import Failed


@pytest.fixture
def params():
    return init_model_params(tiny_model_config(), seed=1)


@pytest.fixture
def saved(tmp_path, params):
    optimizer = Optimizer("adam", lr=0.01)
    for name in params:
        params.accumulate(name, np.ones_like(params.value(name)))
    optimizer.step(params)
    rng = np.random.default_rng(42)
    rng.random(3)
    path = str(tmp_path / "flow.fsck")
    state = {
        "step": 17,
        "config_hash": "abc123",
        "optimizer": optimizer.state_dict(),
        "rng": rng,
        "stage": "pretrain_flow",
        "meta": {"best_val": 0.25},
    }
    save_checkpoint(params, state, path)
    return path, optimizer, rng


class TestRoundTrip:
    def test_parameters_are_bitwise_equal(self, params, saved):
        path, _, _ = saved
        restored = init_model_params(tiny_model_config(), seed=2)
        load_checkpoint(path, restored)
        for name in params:
            assert restored.value(name).tobytes() == params.value(name).tobytes(), name
        assert restored.digest() == params.digest()

    def test_header_and_meta(self, saved):
        path, _, _ = saved
        checkpoint = read_checkpoint(path)
        assert checkpoint.step == 17
        assert checkpoint.config_hash == "abc123"
        assert checkpoint.stage == "pretrain_flow"
        assert checkpoint.meta == {"best_val": 0.25}

    def test_optimizer_state(self, params, saved):
        path, optimizer, _ = saved
        state = read_checkpoint(path).optimizer
        assert state["kind"] == "adam"
        assert state["step"] == 1
        for name in params:
            np.testing.assert_array_equal(state["m"][name], optimizer.state["m"][name])
            np.testing.assert_array_equal(state["v"][name], optimizer.state["v"][name])
            assert state["t"][name].shape == ()
            assert int(state["t"][name]) == 1

    def test_rng_resumes_stream(self, saved):
        path, _, rng = saved
        resumed = read_checkpoint(path).restore_rng()
        np.testing.assert_array_equal(resumed.random(5), rng.random(5))

    def test_no_temporary_file_left(self, saved):
        path, _, _ = saved
        assert not os.path.exists(f"{path}.tmp")
        with open(path, "rb") as handle:
            assert handle.read(4) == MAGIC


class TestNamespaceFilter:
    def test_backbone_only(self, params, saved):
        path, _, _ = saved
        target = init_model_params(tiny_model_config(), seed=9)
        fresh_s = target.digest(["s"])
        fresh_h = target.digest(["h"])
        load_checkpoint(path, target, namespaces=["g"])
        assert target.digest(["g"]) == params.digest(["g"])
        assert target.digest(["s"]) == fresh_s
        assert target.digest(["h"]) == fresh_h

    def test_architecture_mismatch_lists_differences(self, saved):
        path, _, _ = saved
        cfg = tiny_model_config()
        other = ModelConfig(BackboneConfig(n_sample=32, n_centroids=8, radius=1.5, max_k=8, mlp=(8, 16)), cfg.flow_head, cfg.detect_head)
        with pytest.raises(Failed, match="g.setconv.1.w"):
            load_checkpoint(path, init_model_params(other, seed=0), namespaces=["g"])


class TestCorruption:
    def test_bad_magic(self, saved):
        path, _, _ = saved
        with open(path, "r+b") as handle:
            handle.write(b"XXXX")
        with pytest.raises(Failed, match="magic"):
            read_checkpoint(path)

    def test_truncated(self, saved):
        path, _, _ = saved
        size = os.path.getsize(path)
        with open(path, "r+b") as handle:
            handle.truncate(size // 2)
        with pytest.raises(Failed, match="truncated"):
            read_checkpoint(path)

    def test_unknown_version(self, saved):
        path, _, _ = saved
        with open(path, "r+b") as handle:
            handle.seek(4)
            handle.write((99).to_bytes(4, "little"))
        with pytest.raises(Failed, match="version 99"):
            read_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(Failed, match="does not exist"):
            read_checkpoint(str(tmp_path / "missing.fsck"))


class TestMetricsLog:
    def test_rows(self, tmp_path):
        log = MetricsLog(str(tmp_path / "m.csv"), ["train_loss", "val_loss"])
        log.append(1, "flow", 0.5, train_loss=1.25, val_loss=2.0)
        log.append(2, "flow", 1.0, train_loss=1.0)
        rows = log.rows()
        assert [r["step"] for r in rows] == ["1", "2"]
        assert rows[0]["train_loss"] == "1.25"
        assert rows[1]["val_loss"] == ""

    def test_steps_must_increase(self, tmp_path):
        log = MetricsLog(str(tmp_path / "m.csv"), ["train_loss"])
        log.append(5, "flow", 0.1, train_loss=1.0)
        with pytest.raises(Failed, match="step 5"):
            log.append(5, "flow", 0.2, train_loss=1.0)

    def test_unknown_column(self, tmp_path):
        log = MetricsLog(str(tmp_path / "m.csv"), ["train_loss"])
        with pytest.raises(Failed, match="unknown"):
            log.append(1, "flow", 0.1, accuracy=0.5)
