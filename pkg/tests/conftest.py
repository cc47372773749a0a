import numpy as np
import pytest

from fewstep.denoiser import GMMDenoiser, MlpDenoiser, MlpSpec, single_gaussian, two_gaussians
from fewstep.finetune import pretrain

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy2d():
    return two_gaussians(2.0, 0.5, dim=2)


@pytest.fixture(scope="session")
def oracle2d(toy2d):
    return GMMDenoiser(toy2d)


@pytest.fixture(scope="session")
def linear1d():
    return single_gaussian(0.5, 1.0, dim=1)


@pytest.fixture(scope="session")
def pretrained2d(toy2d):
    rng = np.random.default_rng(7)
    h = MlpDenoiser(MlpSpec(dim=2), rng=rng)
    pretrain(h, toy2d, rng, iters=2000)
    return h


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
