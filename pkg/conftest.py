import json
from pathlib import Path

import numpy as np
import pytest


@pytest.fixture
def rng():
    """
    A fixed generator so every test sees the same draws on every run.
    """
    yield np.random.default_rng(20240521)


@pytest.fixture
def single_thread(mocker):
    """
    Pin the worker pool to one thread so pipelines run inline in the test process.
    """
    mocker.patch.dict("os.environ", {"KVTRIM_THREADS": "1", "KVTRIM_LOG_LEVEL": "WARNING"})
    yield


@pytest.fixture
def worker_pool(mocker):
    """
    Three worker processes, so runs over several heads go through the aiomultiprocess pool.
    """
    mocker.patch.dict("os.environ", {"KVTRIM_THREADS": "3", "KVTRIM_LOG_LEVEL": "WARNING"})
    yield


@pytest.fixture
def write_config(tmp_path):
    """
    Returns a function that dumps a run configuration dict to a JSON file in a temporary
    directory and returns its path.
    """

    def _write(config: dict, name: str = "config.json") -> str:
        path = Path(tmp_path, name)
        path.write_text(json.dumps(config))
        return str(path)

    yield _write
