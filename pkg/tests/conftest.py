import numpy as np
import pytest

from epimatch.geometry import (
    Camera,
    CameraIntrinsics,
    RelativePose,
    project,
    rotation_from_axis_angle,
)


def random_intrinsics(rng):
    f = rng.uniform(300.0, 600.0)
    return CameraIntrinsics(f, f * rng.uniform(0.9, 1.1), rng.uniform(280.0, 360.0), rng.uniform(200.0, 280.0))


def random_pose(rng, max_angle_deg=25.0, baseline=(0.2, 1.0)):
    axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(1.0, max_angle_deg))
    R = rotation_from_axis_angle(axis, angle)
    t = rng.normal(size=3)
    t = t / np.linalg.norm(t) * rng.uniform(*baseline)
    return RelativePose(R, t)


def random_camera_pair(rng, same_k=False):
    """Camera 1 at the origin, camera 2 at a random relative pose."""
    k1 = random_intrinsics(rng)
    k2 = k1 if same_k else random_intrinsics(rng)
    pose = random_pose(rng)
    cam1 = Camera(k1, RelativePose.identity())
    cam2 = Camera(k2, pose)
    return cam1, cam2, pose


def visible_points(rng, cam1, cam2, n):
    """World points projecting with positive depth in both cameras."""
    pts = []
    while len(pts) < n:
        X = np.array(
            [rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(3.0, 8.0)]
        )
        z2 = (cam2.pose.R @ X + cam2.pose.t)[2]
        if z2 > 0.1:
            pts.append(X)
    return np.array(pts)


def project_points(cam, pts):
    """Stack of homogeneous pixel projections (w = 1)."""
    return np.array([project(cam, X)[0] for X in pts])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
