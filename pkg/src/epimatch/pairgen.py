"""Pose-only image-pair mining with pseudo-depth overlap heuristics.

Without depth, each view is assumed to observe an enclosing surface: a
hemisphere (plane + dome centred under the camera) or a driving-direction
aligned box. The overlap of a pair is the fraction of a fixed sample grid of
one image whose assumed surface points project into the other image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera

SAMPLE_GRID = 32


@dataclass(frozen=True)
class HemisphereModel:
    z_plane: float  # ground plane height (m), below the camera
    r_sphere: float  # dome radius (m), centred at (x_cam, y_cam, z_plane)


@dataclass(frozen=True)
class BoxModel:
    side: float  # lateral distance to the left/right planes (m)
    bottom: float  # signed height of the floor relative to the camera (m)
    longitudinal: float  # distance to the front/back planes (m)
    driving_dir: tuple | None = None  # unit horizontal direction; None = from neighbours


@dataclass(frozen=True)
class OverlapRange:
    min: float = 0.3
    max: float = 0.8

    def __post_init__(self):
        if not (0.0 <= self.min < self.max <= 1.0):
            raise ValueError("need 0 <= min < max <= 1")


@dataclass
class PoseRecord:
    id: str
    camera: Camera
    timestamp: float | None = None


# presets with the published scene dimensions
PRESETS = {
    "euroc-machine": HemisphereModel(z_plane=-2.0, r_sphere=10.0),
    "euroc-room": HemisphereModel(z_plane=0.0, r_sphere=3.0),
    "sf-street": BoxModel(side=10.0, bottom=-2.0, longitudinal=25.0),
}


def _ray_through_pixel(camera: Camera, u, v):
    """(origin, unit direction) of the viewing ray in world coordinates."""
    K = camera.intrinsics
    d_cam = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    d = camera.pose.R.T @ d_cam
    return camera.center(), d / np.linalg.norm(d)


def _hemisphere_depth(model: HemisphereModel, origin, direction):
    cz = origin[2]
    if cz < model.z_plane:
        return None
    h = cz - model.z_plane
    if h >= model.r_sphere:
        return None  # camera outside the dome
    hits = []
    if direction[2] < 0.0:
        t = (model.z_plane - cz) / direction[2]
        if t > 0:
            # plane hit must lie under the dome
            p = origin + t * direction
            if (p[0] - origin[0]) ** 2 + (p[1] - origin[1]) ** 2 <= model.r_sphere ** 2:
                hits.append(t)
    # sphere centred at (x_cam, y_cam, z_plane): |o - c| = h along +z
    oc = np.array([0.0, 0.0, h])
    b = oc @ direction
    disc = b * b - (h * h - model.r_sphere ** 2)
    if disc >= 0.0:
        t = -b + np.sqrt(disc)  # camera is inside: take the exit point
        if t > 0:
            p = origin + t * direction
            if p[2] >= model.z_plane - 1e-9:
                hits.append(t)
    return min(hits) if hits else None


def _box_depth(model: BoxModel, origin, direction, driving_dir):
    f = np.asarray(driving_dir, dtype=float)
    f = f / np.linalg.norm(f)
    up = np.array([0.0, 0.0, 1.0])
    r = np.cross(f, up)
    r = r / np.linalg.norm(r)
    # components of the ray in the box frame (front = f, right = r, up)
    df = direction @ f
    dr = direction @ r
    dz = direction[2]
    cands = []  # (t, is_front_back)
    for comp, dist in ((df, model.longitudinal), (-df, model.longitudinal)):
        if comp > 1e-12:
            cands.append((dist / comp, True))
    for comp, dist in ((dr, model.side), (-dr, model.side)):
        if comp > 1e-12:
            cands.append((dist / comp, False))
    if dz < -1e-12:
        cands.append((model.bottom / dz, False))  # bottom is below: negative/negative
    cands = [(t, fb) for t, fb in cands if t > 0]
    if not cands:
        return None  # e.g. straight up toward the open top
    t, is_front_back = min(cands)
    if is_front_back:
        return None  # front/back hits never count as overlapping
    return t


def pseudo_depth(model, camera: Camera, u, v, driving_dir=None):
    """First positive ray intersection with the assumed surface, or None."""
    origin, direction = _ray_through_pixel(camera, u, v)
    if isinstance(model, HemisphereModel):
        return _hemisphere_depth(model, origin, direction)
    if isinstance(model, BoxModel):
        dd = driving_dir if driving_dir is not None else model.driving_dir
        if dd is None:
            raise ValueError("box model needs a driving direction")
        return _box_depth(model, origin, direction, dd)
    raise TypeError(f"unknown pseudo-depth model {type(model).__name__}")


def _directional_overlap(model, cam_i: Camera, cam_j: Camera, image_size, driving_dir=None):
    W, H = image_size
    # cell centres of a SAMPLE_GRID x SAMPLE_GRID partition (not the exact
    # border, which would leave the frame under any forward motion)
    us = (np.arange(SAMPLE_GRID) + 0.5) * W / SAMPLE_GRID - 0.5
    vs = (np.arange(SAMPLE_GRID) + 0.5) * H / SAMPLE_GRID - 0.5
    K = cam_j.intrinsics
    count = 0
    for v in vs:
        for u in us:
            d = pseudo_depth(model, cam_i, u, v, driving_dir=driving_dir)
            if d is None:
                continue
            origin, direction = _ray_through_pixel(cam_i, u, v)
            X = origin + d * direction
            Xc = cam_j.pose.R @ X + cam_j.pose.t
            if Xc[2] <= 1e-9:
                continue
            u2 = K.fx * Xc[0] / Xc[2] + K.cx
            v2 = K.fy * Xc[1] / Xc[2] + K.cy
            eps = 1e-6  # keep boundary samples of an identical view inside
            if -eps <= u2 <= W - 1 + eps and -eps <= v2 <= H - 1 + eps:
                count += 1
    return count / float(SAMPLE_GRID * SAMPLE_GRID)


def pseudo_overlap(model, cam_i: Camera, cam_j: Camera, image_size=(640, 480),
                   driving_dir_i=None, driving_dir_j=None):
    """Symmetrized pseudo-overlap score: min of the two directional scores."""
    oij = _directional_overlap(model, cam_i, cam_j, image_size, driving_dir_i)
    oji = _directional_overlap(model, cam_j, cam_i, image_size, driving_dir_j)
    return min(oij, oji)


def driving_directions(records):
    """Per-record horizontal direction from neighbouring camera positions."""
    centers = [r.camera.center() for r in records]
    dirs = []
    for i in range(len(records)):
        a = centers[max(i - 1, 0)]
        b = centers[min(i + 1, len(records) - 1)]
        d = np.asarray(b) - np.asarray(a)
        d[2] = 0.0
        n = np.linalg.norm(d)
        dirs.append(d / n if n > 1e-9 else np.array([1.0, 0.0, 0.0]))
    return dirs


def generate_pairs(records, model, overlap_range: OverlapRange, stride=1, image_size=(640, 480)):
    """All (i, j), i < j over the stride-subsampled records whose symmetrized
    pseudo-overlap falls inside the accepted range. Deterministic order."""
    idxs = list(range(0, len(records), stride))
    ddirs = driving_directions(records) if isinstance(model, BoxModel) and model.driving_dir is None else None
    out = []
    for a in range(len(idxs)):
        for b in range(a + 1, len(idxs)):
            i, j = idxs[a], idxs[b]
            s = pseudo_overlap(
                model, records[i].camera, records[j].camera, image_size,
                driving_dir_i=None if ddirs is None else ddirs[i],
                driving_dir_j=None if ddirs is None else ddirs[j],
            )
            if overlap_range.min <= s <= overlap_range.max:
                out.append((records[i].id, records[j].id, s))
    return out


def write_pairs_file(path, pairs):
    with open(path, "w") as fh:
        for id_i, id_j, score in pairs:
            fh.write(f"{id_i} {id_j} {score:.6f}\n")


def read_pairs_file(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            a, b, s = line.split()
            out.append((a, b, float(s)))
    return out
