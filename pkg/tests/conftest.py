from pathlib import Path

import numpy as np
import pytest

from fedtwin.model import ModelConfig, Sample
from fedtwin.numerics import SeededRng

FIXTURES = Path(__file__).parent / "fixtures"


def make_samples(n: int, plan_dim: int = 2, seed: int = 0) -> list[Sample]:
    rng = SeededRng(seed)
    out = []
    for _ in range(n):
        hist = np.array([[rng.random()] + [float(rng.randrange(2)) for _ in range(plan_dim)] for _ in range(14)])
        plans = np.array([[float(rng.randrange(2)) for _ in range(plan_dim)] for _ in range(7)])
        targets = np.array([rng.random() for _ in range(7)])
        out.append(Sample(hist, plans, targets))
    return out


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(plan_dim=2, hidden_size=4, fc_widths=(4, 3))


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES
