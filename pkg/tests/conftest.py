import numpy as np
import pytest

from poropbdw.mesh import PhantomConfig, build_phantom


@pytest.fixture(scope="session")
def desk_mesh():
    return build_phantom(PhantomConfig())


@pytest.fixture(scope="session")
def coarse_mesh():
    # 124 nodes, 496 DOFs: small enough for dense oracles
    return build_phantom(PhantomConfig(outer=(4.0, 4.0, 4.0), cavity_center=(2.0, 2.0, 2.0),
                                       cavity_size=(2.0, 2.0, 2.0), neck_size=(2.0, 2.0), h=1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_trained():
    from poropbdw.pipeline import preset, run_training

    return run_training(preset("desk"))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
