import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hfnn import geometry as G, nn
from hfnn.physics import FluidParams

settings.register_profile(
    "hfnn", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "hfnn"))

SMALL_COUNTS = {"inlet": 60, "wall": 200, "outlet": 60, "volume": 1500}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fluid():
    return FluidParams()


@pytest.fixture(scope="session")
def pipe():
    return G.DomainSpec("straight-pipe", R=0.010065, length=0.26009)


@pytest.fixture(scope="session")
def aaa():
    return G.DomainSpec("aaa-idealized", R=0.010065, length=0.26009)


@pytest.fixture(scope="session")
def small_cloud(pipe, fluid):
    return G.sample_domain(pipe, SMALL_COUNTS, seed=3, fluid=fluid)


def small_spec(**kw):
    base = dict(input_dim=3, output_dim=4, hidden_layers=2, hidden_width=8, seed=5)
    base.update(kw)
    return nn.NetworkSpec(**base)


ALL_ARCHS = [
    dict(kind=k, embedding=e, factorization=f, fourier_e=4)
    for k in ("mlp", "modified-mlp")
    for e in ("none", "fourier")
    for f in ("none", "rwf")
]


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
