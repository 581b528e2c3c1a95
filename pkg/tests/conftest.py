import socket
import sys
from pathlib import Path

import pytest
from hypothesis import settings

from gridemu import grid as gridmod
from gridemu.config import load_config

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

REPO = Path(__file__).resolve().parents[1]


def port_free(port: int) -> bool:
    with socket.socket() as s:
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            s.bind(("127.0.0.1", port))
        except OSError:
            return False
    return True


@pytest.fixture
def run_dir(tmp_path):
    return tmp_path / "run"


@pytest.fixture
def stepped_grid(run_dir):
    """A stepped-mode grid with default settings; yields the run handle."""
    handle = gridmod.up(load_config(mode="stepped", run_dir=str(run_dir)))
    yield handle
    gridmod.down(handle)


@pytest.fixture
def make_grid(run_dir):
    """Factory for grids with config overrides; everything started is torn down."""
    handles = []

    def make(**overrides):
        overrides.setdefault("mode", "stepped")
        overrides.setdefault("run_dir", str(run_dir))
        handle = gridmod.up(load_config(**overrides))
        handles.append(handle)
        return handle

    yield make
    for h in handles:
        gridmod.down(h)


@pytest.fixture
def cli_env():
    import os
    env = dict(os.environ)
    env["PYTHONPATH"] = str(REPO / "src") + os.pathsep + env.get("PYTHONPATH", "")
    return env


PY = sys.executable
