import copy
from pathlib import Path

import numpy as np
import pytest

from src.config import parse_config
from src.grid import Grid
from src.utils import read_file

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def desk_document():
    return read_file(CONFIG_DIR / "desk.json")


@pytest.fixture
def small_document(desk_document):
    # 9 x 9 nodes with h = 0.5 and 64 steps on [0, 0.5]
    document = copy.deepcopy(desk_document)
    document["grid"].update(nx=9, ny=9)
    document["time"].update(nt=64, T=0.5)
    document["output"]["snapshot_stride"] = 32
    return document


@pytest.fixture
def small_config(small_document):
    return parse_config(small_document)


@pytest.fixture
def small_scenario(small_config):
    return small_config.build_scenario()


@pytest.fixture
def grid():
    return Grid.from_extent(9, 9, 4.0, 4.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
