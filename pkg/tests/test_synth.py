import numpy as np
import pytest

from epimatch import errors
from epimatch.geometry import (
    CameraIntrinsics,
    RelativePose,
    epipolar_line,
    hom,
    point_line_distance,
)
from epimatch.grid import GridSpec
from epimatch.synth import (
    Plane,
    PoseSampler,
    RenderedPair,
    SceneSpec,
    TextureSpec,
    generate_pairs,
    gt_correspondence_grid,
    load_dataset,
    load_pair_file,
    make_domain,
    room_planes,
    sample_pair,
    save_dataset,
    save_pair_file,
)


def small_domain(name="A", seed=3, noise=None):
    spec = make_domain(name, seed=seed)
    if noise is not None:
        from dataclasses import replace

        spec = replace(spec, noise_sigma=noise)
    return spec


def stereo_spec(seed=0):
    """Single fronto-parallel wall; cameras look straight at it."""
    wall = Plane((-10.0, 5.0, -10.0), (1, 0, 0), (0, 0, 1), 20.0, 20.0)
    return SceneSpec(
        planes=(wall,),
        texture=TextureSpec(scales=(0.5, 0.25), amplitudes=(0.5, 0.3), contrast=0.8),
        pose_sampler=PoseSampler((2, 5), (0.1, 0.2), 2.0),
        noise_sigma=0.0,
        seed=seed,
    )


class TestSamplePair:
    def test_deterministic(self):
        spec = small_domain()
        a = sample_pair(spec, 4)
        b = sample_pair(spec, 4)
        assert a.image1.tobytes() == b.image1.tobytes()
        assert a.image2.tobytes() == b.image2.tobytes()
        assert a.depth1.tobytes() == b.depth1.tobytes()
        assert np.array_equal(a.pose.R, b.pose.R)

    def test_identity_pose_hook(self):
        spec = small_domain(noise=0.0)
        pair = sample_pair(spec, 0, pose_override=RelativePose.identity())
        assert np.array_equal(pair.image1, pair.image2)
        assert pair.F_gt is None

    def test_full_depth_coverage(self):
        pair = sample_pair(small_domain(), 1)
        assert np.all(pair.depth1 > 0)
        assert np.all(pair.depth2 > 0)

    def test_per_pixel_epipolar_audit(self):
        # every depth-backprojected pixel lands on its epipolar line
        for index in range(3):
            pair = sample_pair(small_domain(seed=9), index)
            K = pair.K
            H, W = pair.depth1.shape
            us, vs = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
            d = pair.depth1.ravel()
            X = np.stack(
                [
                    d * (us.ravel() - K.cx) / K.fx,
                    d * (vs.ravel() - K.cy) / K.fy,
                    d,
                ],
                axis=-1,
            )
            X2 = X @ pair.pose.R.T + pair.pose.t
            front = X2[:, 2] > 1e-9
            u2 = K.fx * X2[front, 0] / X2[front, 2] + K.cx
            v2 = K.fy * X2[front, 1] / X2[front, 2] + K.cy
            ones = np.ones_like(us.ravel()[front])
            lines = np.stack([us.ravel()[front], vs.ravel()[front], ones], axis=-1) @ pair.F_gt.m.T
            num = np.abs(np.einsum("ij,ij->i", np.stack([u2, v2, ones], axis=-1), lines))
            den = np.hypot(lines[:, 0], lines[:, 1])
            assert np.max(num / den) < 1e-6

    def test_degenerate_pose_error(self):
        from dataclasses import replace

        spec = replace(small_domain(), min_overlap=1.01, max_pose_retries=3)
        with pytest.raises(errors.DegeneratePose):
            sample_pair(spec, 0)


class TestGtCorrespondenceGrid:
    def test_identity_pose_maps_cells_to_themselves(self):
        spec = small_domain(noise=0.0)
        pair = sample_pair(spec, 0, pose_override=RelativePose.identity())
        grid = GridSpec.for_image(*spec.image_size, 8)
        targets, points = gt_correspondence_grid(pair, grid)
        centers = grid.cell_centers()
        assert np.array_equal(targets, np.arange(grid.m))
        assert np.allclose(points, centers, atol=1e-9)

    def test_stereo_constant_disparity(self):
        spec = stereo_spec()
        B = 0.4
        pair = sample_pair(spec, 0, pose_override=RelativePose(np.eye(3), [-B, 0.0, 0.0]))
        grid = GridSpec.for_image(*spec.image_size, 8)
        targets, points = gt_correspondence_grid(pair, grid)
        K = spec.intrinsics
        Z = pair.depth1[64, 64]
        disparity = K.fx * B / Z
        centers = grid.cell_centers()
        valid = targets >= 0
        assert valid.sum() > grid.m // 2
        assert np.allclose(points[valid, 0], centers[valid, 0] - disparity, atol=1e-6)
        assert np.allclose(points[valid, 1], centers[valid, 1], atol=1e-6)

    def test_points_behind_camera_are_none(self):
        spec = stereo_spec()
        # camera 2 rotated 180 degrees: scene is behind it
        Rflip = np.diag([-1.0, 1.0, -1.0])
        pair = sample_pair(spec, 0, pose_override=RelativePose(Rflip, [0.3, 0.0, 0.0]))
        grid = GridSpec.for_image(*spec.image_size, 8)
        targets, _ = gt_correspondence_grid(pair, grid)
        assert np.all(targets == -1)

    def test_targets_lie_on_epipolar_lines(self):
        pair = sample_pair(small_domain(seed=21), 2)
        grid = GridSpec.for_image(*pair.image1.shape, 8)
        targets, points = gt_correspondence_grid(pair, grid)
        centers = grid.cell_centers()
        for i in np.where(targets >= 0)[0][::7]:
            line = epipolar_line(pair.F_gt, hom(*centers[i]))
            assert point_line_distance(line, hom(*points[i])) < 1e-6


class TestDomains:
    def test_both_validate_and_differ(self):
        a = make_domain("A")
        b = make_domain("B")
        assert a.texture != b.texture
        assert a.pose_sampler != b.pose_sampler
        assert a.noise_sigma != b.noise_sigma

    def test_unknown_domain(self):
        with pytest.raises(ValueError):
            make_domain("C")

    def test_gradient_magnitude_separation(self):
        def mean_grad(spec, n=6):
            vals = []
            for i in range(n):
                img = sample_pair(spec, i).image1
                gy, gx = np.gradient(img)
                vals.append(np.mean(np.hypot(gx, gy)))
            return np.mean(vals)

        ga = mean_grad(make_domain("A", seed=5))
        gb = mean_grad(make_domain("B", seed=5))
        assert ga >= 2.0 * gb


class TestPairFiles:
    def test_round_trip_bit_identical(self, tmp_path):
        pair = sample_pair(small_domain(), 0)
        path = tmp_path / "pair.bin"
        save_pair_file(path, pair)
        loaded = load_pair_file(path)
        assert loaded.image1.tobytes() == pair.image1.tobytes()
        assert loaded.image2.tobytes() == pair.image2.tobytes()
        assert loaded.depth1.tobytes() == pair.depth1.tobytes()
        assert loaded.depth2.tobytes() == pair.depth2.tobytes()
        assert np.allclose(loaded.pose.R, pair.pose.R, atol=1e-15)
        assert np.allclose(loaded.pose.t, pair.pose.t, atol=1e-15)
        assert np.allclose(loaded.F_gt.m, pair.F_gt.m, atol=1e-12)

    def test_dataset_round_trip(self, tmp_path):
        spec = small_domain(seed=8)
        saved = save_dataset(spec, 3, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert len(loaded) == 3
        for a, b in zip(saved, loaded):
            assert a.image1.tobytes() == b.image1.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXXXXXX" + b"\x00" * 100)
        with pytest.raises(ValueError):
            load_pair_file(path)
