import os
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from core.networks import init_mlp  # noqa: E402
from core.parameters import EqParam, Params  # noqa: E402
from models.schemas import MlpSpec  # noqa: E402
from utils.rng import generator  # noqa: E402

CONFIG_DIR = ROOT / "configs"


def pytest_collection_modifyitems(config, items):
    if os.environ.get("PINNFORGE_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set PINNFORGE_RUN_SLOW=1 to run acceptance runs")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return generator(1234, 99)


@pytest.fixture
def small_mlp():
    """Two hidden layers of width 8 on one input."""
    return init_mlp(MlpSpec(layer_sizes=[1, 8, 8, 1], seed=3))


@pytest.fixture
def small_mlp_2d():
    return init_mlp(MlpSpec(layer_sizes=[2, 8, 8, 1], seed=5))


@pytest.fixture
def ode_params(small_mlp):
    return Params(nn=small_mlp, eq={"a": EqParam.scalar(1.0)})


@pytest.fixture
def run_dir(tmp_path):
    directory = tmp_path / "run"
    return directory


def write_config(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def tiny_ode_config(tmp_path):
    return write_config(
        tmp_path / "tiny_ode.toml",
        """
[problem]
id = "linear_ode"
mode = "forward"

[net]
hidden = [8]

[sampler]
n_interior = 16
n_initial = 1

[solve]
n_iter = 20
seed = 7
validation_every = 10
weights = { dyn = 1.0, init = 1.0 }

[reference]
points_per_axis = 11
validation_points_per_axis = 5
""",
    )
