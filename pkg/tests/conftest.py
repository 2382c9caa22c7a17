import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("suite", max_examples=50, deadline=None,
                          derandomize=True)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def golden_dir():
    return Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def six_unit_fixture():
    """Hand-chosen 6-unit uplift fixture: 3 treated, 3 control."""
    t = np.array([1, 1, 1, 0, 0, 0])
    y = np.array([1.0, 0.0, 1.0, 0.0, 1.0, 0.0])
    scores = np.array([0.9, 0.1, 0.5, 0.3, 0.8, 0.2])
    return scores, t, y


@pytest.fixture(scope="session")
def tiny_hyper():
    from factorcfr import Hyperparams

    return Hyperparams(
        m_experts=2, n_heads=2, d_m=8, h=6,
        expert_hidden=(8,), tower_hidden=(8,), head_hidden=(8,),
        batch_size=32, max_iterations=50, eval_interval=25,
    )
