import os

import hypothesis
import numpy as np
import pytest

np.seterr(all="warn")

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=200, deadline=None, derandomize=True)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def toy_schedule():
    from utils.diffusion import make_linear_beta_schedule

    return make_linear_beta_schedule(20, 1e-3, 0.3)


@pytest.fixture
def quarter_schedule():
    """Two steps with alpha_bar = (0.5, 0.25)."""
    from utils.diffusion import NoiseSchedule

    return NoiseSchedule(T=2, beta=np.array([0.5, 0.5]), alpha_bar=np.array([0.5, 0.25]))


@pytest.fixture
def toy_model():
    """Small network with a non-zero output layer, so eps_hat depends on (x, t)."""
    from utils.diffusion import ScoreNetwork

    net = ScoreNetwork.init(2, 20, hidden=16, depth=2, time_dim=8, seed=0)
    rng = np.random.default_rng(1)
    params = dict(net.params)
    params["out_w"] = 0.3 * rng.standard_normal((16, 2))
    params["out_b"] = 0.05 * rng.standard_normal(2)
    return net.with_params(params)
