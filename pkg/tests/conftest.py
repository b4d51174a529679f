import os

import numpy as np
import pytest

from modules import util
from modules.logs import MyLogger

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# stage modules bind util.logger at import time
util.logger = MyLogger("Flow Pretrain", "tests.log", "DEBUG", ROOT, 100, "=", True, 1, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def project_root():
    return ROOT


@pytest.fixture
def smoke_config(tmp_path):
    from modules.config import Config

    return Config(ROOT, {"config_file": "smoke", "out_dir": str(tmp_path / "run")})


@pytest.fixture
def write_config(tmp_path):
    """Write a YAML config into tmp_path and load it"""
    from modules.config import Config

    def _write(text, **args):
        path = tmp_path / "config.yml"
        path.write_text(text, encoding="utf-8")
        return Config(ROOT, {"config_file": str(path), "out_dir": str(tmp_path / "run"), **args})

    return _write
