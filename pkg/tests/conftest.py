import os
import tempfile

import numpy as np
import pytest

# isolate the on-disk basis cache from the user's home directory
os.environ.setdefault("PULLBACK_NS_CACHE", tempfile.mkdtemp(prefix="pullback_ns_test_cache_"))

from pullback_ns.background_flow import BoundaryData, build_background_flow  # noqa: E402
from pullback_ns.operators import build_tensors  # noqa: E402
from pullback_ns.spectral_basis import DomainGrid, build_stokes_basis  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def grid32():
    return DomainGrid(32)


@pytest.fixture(scope="session")
def basis16(grid32):
    return build_stokes_basis(grid32, 16)


@pytest.fixture(scope="session")
def flow_zero(grid32):
    return build_background_flow(grid32, BoundaryData.zero(), 0.15)


@pytest.fixture(scope="session")
def flow_lift(grid32):
    return build_background_flow(grid32, BoundaryData.smooth(0.2), 0.15)


@pytest.fixture(scope="session")
def tensors_zero(basis16, flow_zero):
    return build_tensors(basis16, flow_zero, 0.1)


@pytest.fixture(scope="session")
def tensors_lift(basis16, flow_lift):
    return build_tensors(basis16, flow_lift, 0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
