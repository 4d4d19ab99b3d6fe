import numpy as np
import pytest

from nsurf.core import CameraIntrinsics, Pose


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_pose(rng, scale=1.0) -> Pose:
    return Pose(random_rotation(rng), rng.normal(size=3) * scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def vga():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


_ACCEPTANCE = []


@pytest.fixture
def criterion(capsys):
    """``criterion(n, ok, detail)`` prints a pass/fail line, keeps it for the summary, and asserts."""

    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
