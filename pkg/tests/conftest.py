import numpy as np
import pytest

from cascade_mvs.geometry import CameraParams, intrinsics


def random_rotation(rng, max_angle=0.3):
    """Rotation about a random axis by an angle in ``[-max_angle, max_angle]``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    a = rng.uniform(-max_angle, max_angle)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(a) * k + (1 - np.cos(a)) * (k @ k)


def random_camera(rng, center_scale=0.3):
    K = intrinsics(rng.uniform(80, 200), rng.uniform(40, 80), rng.uniform(30, 60))
    R = random_rotation(rng)
    c = rng.normal(scale=center_scale, size=3)
    return CameraParams(K, R, -R @ c)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
