import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rdoe.models import CASE1, CASE2, CASE3, CASE4, NoiseModel, ParameterBox
from rdoe.optimizer import SolverConfig

settings.register_profile(
    "rdoe", deadline=None, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("rdoe")

SIGMA = NoiseModel([0.1 / 3])

# parameter boxes used throughout the case studies
BOXES = {
    "case1": ParameterBox([0.5], [1.5]),
    "case2": ParameterBox([0.5, 0.5], [1.5, 1.5]),
    "case3": ParameterBox([0.55, 0.1], [0.9, 0.45]),
    "case4": ParameterBox([1.0, 300.0, 283.0, 318.0], [2.0, 320.0, 293.0, 328.0]),
}
MODELS = {"case1": CASE1, "case2": CASE2, "case3": CASE3, "case4": CASE4}


def rel_close(a, b, rtol):
    """``|a - b| <= rtol * max(|a|, |b|)`` plus round-off."""
    return abs(a - b) <= rtol * max(abs(a), abs(b)) + 1e-300


@pytest.fixture
def sigma():
    return SIGMA


@pytest.fixture
def fast_solver():
    return SolverConfig(n_starts=8)


def random_design(rng: np.random.Generator, model, n: int) -> np.ndarray:
    return rng.uniform(model.u_lower, model.u_upper, size=(n, model.n_u))
