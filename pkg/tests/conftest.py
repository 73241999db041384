import numpy as np
import pytest

from uwb_rte.geometry import FrameTransform, yaw_matrix
from uwb_rte.scenario import MeasurementSet, default_layout, random_scenario, synthesize_ranges

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def exact_measurements(p1, p2, tf: FrameTransform, n_rep=1, sigma=1e-12) -> MeasurementSet:
    """Noise-free MeasurementSet built directly from positions, bypassing the simulator."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    q = p2 @ yaw_matrix(tf.theta).T + tf.translation
    dist = np.linalg.norm(p1[:, None, :] - q[None, :, :], axis=2)
    ranges = np.repeat(dist[:, :, None], n_rep, axis=2)
    return MeasurementSet(p1, p2, ranges, np.full(dist.shape, sigma))


@pytest.fixture
def case_i_noisy():
    cfg = random_scenario(default_layout(1, 1), seed=11, sigma=1.0)
    return cfg, synthesize_ranges(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
