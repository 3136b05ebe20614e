"""Exact two-view epipolar geometry.

Conventions: homogeneous image points are numpy arrays of shape (3,) (or
(N, 3) for the batched residual/distance helpers); lines are (a, b, c)
arrays with a*u + b*v + c*w = 0. Poses are world-to-camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    AmbiguousCheirality,
    BehindCamera,
    DegenerateBaseline,
    DegenerateConfiguration,
    DegenerateLine,
    EpipoleQuery,
    PointAtInfinity,
    ZeroTranslation,
)

# Translations below this norm (times scene scale) are rejected as pure rotation.
BASELINE_EPSILON = 1e-8


def hom(u, v, w=1.0):
    """Homogeneous 2D point as a (3,) array."""
    return np.array([u, v, w], dtype=float)


def dehom(x):
    """Return (u, v) of a homogeneous point with w != 0."""
    x = np.asarray(x, dtype=float)
    if x[2] == 0.0:
        raise PointAtInfinity("cannot dehomogenize a point at infinity")
    return x[:2] / x[2]


def normalized_w(x):
    """Scale a homogeneous point so w = 1."""
    x = np.asarray(x, dtype=float)
    if x[2] == 0.0:
        raise PointAtInfinity("point at infinity has no w = 1 form")
    return x / x[2]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def inverse(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass
class RelativePose:
    """Rotation plus translation direction, world-to-camera (x_cam = R x + t)."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)

    def validate(self, tol=1e-9):
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=tol):
            raise ValueError("R is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > tol:
            raise ValueError("det(R) != +1")
        return self

    @staticmethod
    def identity():
        return RelativePose(np.eye(3), np.zeros(3))

    def inverse(self):
        return RelativePose(self.R.T, -self.R.T @ self.t)

    def compose(self, other):
        """Pose mapping x -> self(other(x))."""
        return RelativePose(self.R @ other.R, self.R @ other.t + self.t)


def relative_between(pose1: RelativePose, pose2: RelativePose) -> RelativePose:
    """Pose of camera 2 relative to camera 1 (x_cam2 = R x_cam1 + t)."""
    return pose2.compose(pose1.inverse())


@dataclass
class Camera:
    intrinsics: CameraIntrinsics
    pose: RelativePose

    def projection_matrix(self):
        K = self.intrinsics.matrix()
        return K @ np.hstack([self.pose.R, self.pose.t.reshape(3, 1)])

    def center(self):
        """Camera centre in world coordinates."""
        return -self.pose.R.T @ self.pose.t


def _canonicalize(m):
    """Frobenius norm 1, largest-magnitude entry positive."""
    m = np.asarray(m, dtype=float)
    n = np.linalg.norm(m)
    if n == 0.0:
        raise DegenerateConfiguration("zero matrix cannot be canonicalized")
    m = m / n
    flat = np.abs(m).ravel()
    if m.ravel()[int(np.argmax(flat))] < 0:
        m = -m
    return m


@dataclass
class FundamentalMatrix:
    """Rank-2 scale-free 3x3 relation; stored canonicalized."""

    m: np.ndarray

    @staticmethod
    def from_matrix(m):
        return FundamentalMatrix(_canonicalize(m))

    def transpose(self):
        return FundamentalMatrix.from_matrix(self.m.T)


@dataclass
class EssentialMatrix:
    m: np.ndarray


def cross_matrix(t):
    """Skew matrix [t]x with [t]x v = t x v."""
    t = np.asarray(t, dtype=float).reshape(3)
    return np.array(
        [[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]]
    )


def essential_from_pose(pose: RelativePose) -> EssentialMatrix:
    """E = [t]x R for a calibrated pair."""
    if np.linalg.norm(pose.t) <= BASELINE_EPSILON:
        raise DegenerateBaseline("translation below baseline epsilon")
    return EssentialMatrix(cross_matrix(pose.t) @ pose.R)


def fundamental_from_pose(
    K1: CameraIntrinsics,
    K2: CameraIntrinsics,
    pose: RelativePose,
    baseline_epsilon=BASELINE_EPSILON,
) -> FundamentalMatrix:
    """F = K2^-T [t]x R K1^-1, canonicalized."""
    if np.linalg.norm(pose.t) <= baseline_epsilon:
        raise DegenerateBaseline(
            f"|t| = {np.linalg.norm(pose.t):.3e} <= {baseline_epsilon:.3e}"
        )
    F = K2.inverse().T @ cross_matrix(pose.t) @ pose.R @ K1.inverse()
    return FundamentalMatrix.from_matrix(F)


def fundamental_to_essential(F: FundamentalMatrix, K1, K2) -> EssentialMatrix:
    """E = K2^T F K1."""
    return EssentialMatrix(K2.matrix().T @ F.m @ K1.matrix())


def epipolar_line(F: FundamentalMatrix, x1):
    """Line l12 = F x1 in image 2."""
    x1 = np.asarray(x1, dtype=float)
    line = F.m @ x1
    if np.linalg.norm(line) < 1e-12 * np.linalg.norm(x1):
        raise EpipoleQuery("x1 is the epipole of F")
    return line


def epipolar_residual(F: FundamentalMatrix, x1, x2):
    """Algebraic residual x2^T F x1; batched over leading axes."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    return np.einsum("...i,ij,...j->...", x2, F.m, x1)


def point_line_distance(line, x):
    """Perpendicular distance from a finite point to a line."""
    line = np.asarray(line, dtype=float)
    n = np.hypot(line[0], line[1])
    if n == 0.0:
        raise DegenerateLine("line has (a, b) = (0, 0)")
    x = normalized_w(x)
    return abs(line @ x) / n


def symmetric_epipolar_distance_sq(F: FundamentalMatrix, x1, x2):
    """Squared symmetric epipolar distance; batched over leading axes.

    r^2 * (1 / |(F x1)_{1,2}|^2 + 1 / |(F^T x2)_{1,2}|^2) with r = x2^T F x1.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    l2 = x1 @ F.m.T  # F x1 per row
    l1 = x2 @ F.m  # F^T x2 per row
    d2 = np.sum(l2[..., :2] ** 2, axis=-1)
    d1 = np.sum(l1[..., :2] ** 2, axis=-1)
    if np.any(d2 == 0.0) or np.any(d1 == 0.0):
        raise DegenerateLine("epipolar line with vanishing (a, b)")
    r = np.einsum("...i,...i->...", x2, l2)
    return r * r * (1.0 / d2 + 1.0 / d1)


def normalize_point(K: CameraIntrinsics, x):
    """Map a pixel point to normalized camera coordinates (w = 1)."""
    return normalized_w(K.inverse() @ np.asarray(x, dtype=float))


def denormalize_point(K: CameraIntrinsics, x):
    """Inverse of normalize_point."""
    return normalized_w(K.matrix() @ np.asarray(x, dtype=float))


def normalize_points(K: CameraIntrinsics, pts):
    """Vectorized normalize for (N, 2) pixel coordinates -> (N, 3), w = 1."""
    pts = np.asarray(pts, dtype=float)
    out = np.empty((pts.shape[0], 3))
    out[:, 0] = (pts[:, 0] - K.cx) / K.fx
    out[:, 1] = (pts[:, 1] - K.cy) / K.fy
    out[:, 2] = 1.0
    return out


def project(camera: Camera, X):
    """Project a world point; returns (homogeneous pixel with w = 1, depth)."""
    X = np.asarray(X, dtype=float).reshape(3)
    Xc = camera.pose.R @ X + camera.pose.t
    depth = Xc[2]
    if depth <= 0.0:
        raise BehindCamera(f"depth = {depth:.6g}")
    pix = camera.intrinsics.matrix() @ Xc
    return pix / pix[2], depth


def triangulate(cam1: Camera, cam2: Camera, x1, x2):
    """Linear (DLT) triangulation from two views."""
    if np.allclose(cam1.center(), cam2.center(), atol=1e-12):
        raise DegenerateConfiguration("cameras share a centre")
    P1 = cam1.projection_matrix()
    P2 = cam2.projection_matrix()
    x1 = normalized_w(x1)
    x2 = normalized_w(x2)
    A = np.vstack(
        [
            x1[0] * P1[2] - P1[0],
            x1[1] * P1[2] - P1[1],
            x2[0] * P2[2] - P2[0],
            x2[1] * P2[2] - P2[1],
        ]
    )
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-12 * s[0]:
        raise DegenerateConfiguration("triangulation system is rank-deficient")
    X = Vt[-1]
    if abs(X[3]) < 1e-12 * np.linalg.norm(X):
        raise DegenerateConfiguration("triangulated point at infinity")
    return X[:3] / X[3]


def _cheirality_votes(R, t, x1n, x2n):
    """Count correspondences with positive depth in both views for P2 = [R|t]."""
    votes = 0
    I = np.eye(3)
    cam1 = Camera(CameraIntrinsics(1, 1, 0, 0), RelativePose(I, np.zeros(3)))
    cam2 = Camera(CameraIntrinsics(1, 1, 0, 0), RelativePose(R, t))
    for a, b in zip(x1n, x2n):
        try:
            X = triangulate(cam1, cam2, a, b)
        except DegenerateConfiguration:
            continue
        z1 = X[2]
        z2 = (R @ X + t)[2]
        if z1 > 0 and z2 > 0:
            votes += 1
    return votes


def decompose_essential(E: EssentialMatrix, x1n, x2n) -> RelativePose:
    """Recover (R, unit t) from E by the cheirality vote.

    x1n, x2n: (N, 3) normalized (K = I) homogeneous correspondences, N >= 1.
    """
    x1n = np.atleast_2d(np.asarray(x1n, dtype=float))
    x2n = np.atleast_2d(np.asarray(x2n, dtype=float))
    if x1n.shape[0] < 1:
        raise DegenerateConfiguration("need at least one correspondence")
    U, _, Vt = np.linalg.svd(E.m)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    t = t / np.linalg.norm(t)
    candidates = [
        (U @ W @ Vt, t),
        (U @ W @ Vt, -t),
        (U @ W.T @ Vt, t),
        (U @ W.T @ Vt, -t),
    ]
    votes = [_cheirality_votes(R, tc, x1n, x2n) for R, tc in candidates]
    order = np.argsort(votes)[::-1]
    best, second = order[0], order[1]
    if votes[best] == votes[second]:
        raise AmbiguousCheirality(
            f"cheirality tie at {votes[best]} votes between two decompositions"
        )
    R, tc = candidates[best]
    return RelativePose(R, tc)


def rotation_from_axis_angle(axis, angle_rad):
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=float).reshape(3)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.eye(3)
    k = axis / n
    K = cross_matrix(k)
    return np.eye(3) + np.sin(angle_rad) * K + (1 - np.cos(angle_rad)) * (K @ K)


def quat_to_rotation(q):
    """Unit quaternion (w, x, y, z) to rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(R):
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
            q = np.array(
                [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
            )
        elif i == 1:
            s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
            q = np.array(
                [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
            )
        else:
            s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
            q = np.array(
                [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
            )
    q = q / np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def write_pose_file(path, cameras):
    """Write `id fx fy cx cy qw qx qy qz tx ty tz` lines (world-to-camera)."""
    with open(path, "w") as fh:
        for cam_id, cam in cameras:
            k = cam.intrinsics
            q = rotation_to_quat(cam.pose.R)
            t = cam.pose.t
            fields = [k.fx, k.fy, k.cx, k.cy, *q, *t]
            fh.write(f"{cam_id} " + " ".join(f"{v:.17g}" for v in fields) + "\n")


def read_pose_file(path):
    """Read the pose file format back into [(id, Camera), ...]."""
    cameras = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 12:
                raise ValueError(f"expected 12 fields per pose line, got {len(parts)}")
            cam_id = parts[0]
            vals = [float(v) for v in parts[1:]]
            k = CameraIntrinsics(*vals[0:4])
            R = quat_to_rotation(vals[4:8])
            t = np.array(vals[8:11])
            cameras.append((cam_id, Camera(k, RelativePose(R, t))))
    return cameras


def rotation_angle_deg(R):
    """Rotation angle of a rotation matrix, in degrees."""
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def angular_error_deg(v1, v2, signed=False):
    """Angle between two vectors in degrees; |dot| unless signed."""
    v1 = np.asarray(v1, dtype=float).reshape(3)
    v2 = np.asarray(v2, dtype=float).reshape(3)
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 == 0.0 or n2 == 0.0:
        raise ZeroTranslation("angular error of a zero vector")
    c = v1 @ v2 / (n1 * n2)
    if not signed:
        c = abs(c)
        c = np.clip(c, 0.0, 1.0)
    else:
        c = np.clip(c, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))
