from pathlib import Path

import numpy as np
import pytest

from app.services.problem_service import ProblemInstance, problem_service
from app.services.saddle_service import SaddleSolver
from app.services.network_service import LearningRateSchedule, WeightNetwork
from app.utils.cache import label_cache


@pytest.fixture(autouse=True)
def clear_label_cache():
    label_cache.clear()
    yield
    label_cache.clear()


@pytest.fixture
def dr1p() -> ProblemInstance:
    return problem_service.instance("dr1p")


@pytest.fixture
def dr2p() -> ProblemInstance:
    return problem_service.instance("dr2p")


@pytest.fixture
def adv() -> ProblemInstance:
    return problem_service.instance("adv_rhs")


@pytest.fixture
def diff2d() -> ProblemInstance:
    return problem_service.instance("diff2d")


@pytest.fixture
def solver() -> SaddleSolver:
    return SaddleSolver(threads=1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def dr1p_network() -> WeightNetwork:
    return WeightNetwork.init([1, 10, 10, 10, 4], [1.0], [10.0], seed=0)


@pytest.fixture
def short_schedule() -> LearningRateSchedule:
    return LearningRateSchedule([(1e-3, 20), (1e-4, 10)])


@pytest.fixture
def output_dir(tmp_path: Path) -> Path:
    return tmp_path / "run"
