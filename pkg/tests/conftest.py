import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from piobf.bench import build_world
from piobf.core import PrivacyParams, TrainConfig
from piobf.pinet import PINet, train

settings.register_profile("repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def world():
    return build_world()


@pytest.fixture(scope="session")
def ref_net(world):
    cfg = TrainConfig(seed=0)
    res = train(world.gallery, cfg, world.classifier)
    return PINet.build(res, world.gallery, world.classifier, cfg)


@pytest.fixture(scope="session")
def ref_params(world):
    return PrivacyParams(1.0, 16, 0.5, world.beta)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
