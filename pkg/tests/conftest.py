from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from taco.data import CATEGORICAL, NUMERIC, Column, Table
from taco.infer import Model
from taco.prior import PriorConfig, episode_rng, sample_episode
from taco.tab2d import ModelConfig
from taco.train import init_model

settings.register_profile("ci", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

SMALL_PRIOR = PriorConfig(n_rows=(60, 60), n_features=(2, 6), n_classes=(2, 3))


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return ModelConfig(embed_dim=8, blocks=2, heads=2)


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_model(tiny_cfg, seed=3)


@pytest.fixture
def tiny_model(tiny_cfg, tiny_params) -> Model:
    return Model.from_params(tiny_params, tiny_cfg, "float64")


def make_table(n: int, m: int, n_classes: int = 2, seed: int = 0, categorical: tuple[int, ...] = ()) -> Table:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, m))
    cols = []
    for j in range(m):
        if j in categorical:
            X[:, j] = rng.integers(0, 3, n)
            cols.append(Column(f"c{j}", CATEGORICAL, ("a", "b", "c")))
        else:
            cols.append(Column(f"x{j}", NUMERIC))
    y = rng.integers(0, n_classes, n)
    y[:n_classes] = np.arange(n_classes)
    return Table(X, y, cols, classes=tuple(str(c) for c in range(n_classes)))


def small_episode(seed: int = 0, prior: PriorConfig = SMALL_PRIOR):
    return sample_episode(prior, episode_rng(seed, 0), f"t{seed}")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.VERDICTS:
        terminalreporter.write_line(line)
