import numpy as np
import pytest
import torch
from hypothesis import settings
from scipy.spatial.transform import Rotation

from dvmnerf.geometry import Camera, CameraIntrinsics, CameraPose, look_at

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")
torch.set_num_threads(1)


def random_rotation(rng) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def random_pose(rng, spread=3.0) -> CameraPose:
    return CameraPose.from_centre(random_rotation(rng), rng.uniform(-spread, spread, 3))


def random_intrinsics(rng, w=64, h=48) -> CameraIntrinsics:
    f = rng.uniform(40, 90)
    return CameraIntrinsics(f, f * rng.uniform(0.9, 1.1), w / 2 + rng.uniform(-3, 3), h / 2 + rng.uniform(-3, 3), w, h)


def sphere_camera(azimuth, elevation, radius=4.0, k=None) -> Camera:
    k = k or CameraIntrinsics.from_fov(0.6911112, 64, 64)
    eye = radius * np.array([np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth),
                             np.sin(elevation)])
    return Camera(k, look_at(eye, np.zeros(3)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0])):
        terminalreporter.write_line(f"criterion {name}: {'PASS' if ok else 'FAIL'}  {detail}")
