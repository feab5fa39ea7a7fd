import numpy as np
import pytest
from hypothesis import given, strategies as st

from dvmnerf.errors import CoincidentCentres, SingularWarp
from dvmnerf.geometry import Camera, CameraIntrinsics, CameraPose, look_at, pixel_grid
from dvmnerf.rectify import (baseline_axes, build_warp_pair, detect_vertical, lift_depth, orient_axes,
                             rectify_pair, rectifying_basis, warp_depth, warp_image)

from conftest import random_pose, random_rotation
from harness import CONFIGS, config_pair, covisible_points, epipolar_check, supplementary_pairs

seeds = st.integers(0, 2**32 - 1)
K64 = CameraIntrinsics.from_fov(0.6911112, 64, 64)
IDENT = CameraPose(np.eye(3), np.zeros(3))


def at(centre, rotation=np.eye(3)):
    return CameraPose.from_centre(rotation, centre)


class TestBaselineAxes:
    def test_hand_cross_product(self):
        v_x, v_y = baseline_axes(at([1, 0, 0]), at([0, 0, 0]))
        np.testing.assert_allclose(v_x, [1, 0, 0])
        np.testing.assert_allclose(v_y, [0, -1, 0])  # (1,0,0) x (0,0,1)

    def test_coincident(self):
        with pytest.raises(CoincidentCentres):
            baseline_axes(at([1, 2, 3]), at([1, 2, 3]))

    @given(seeds)
    def test_orthonormal(self, seed):
        rng = np.random.default_rng(seed)
        v_x, v_y = baseline_axes(random_pose(rng), random_pose(rng))
        assert abs(v_x @ v_y) < 1e-9
        assert np.linalg.norm(v_x) == pytest.approx(1) and np.linalg.norm(v_y) == pytest.approx(1)


class TestConfigurationProbes:
    def test_horizontal(self):
        assert detect_vertical(np.array([1.0, 0, 0]), IDENT) == (0.0, False)

    def test_vertical(self):
        assert detect_vertical(np.array([0.0, 1, 0]), IDENT) == (2.0, True)

    def test_forward_uses_positive_zero_sign(self):
        assert detect_vertical(np.array([0.0, 0, 1]), IDENT) == (2.0, True)

    def test_probes_live_in_camera_frame(self):
        # camera rolled a quarter turn: world x is its vertical axis
        roll = np.array([[0.0, 1, 0], [-1, 0, 0], [0, 0, 1]])
        assert detect_vertical(np.array([1.0, 0, 0]), CameraPose(roll, np.zeros(3)))[1]

    def test_orient_keeps_and_flips(self):
        v_x, v_y, sx, sy = orient_axes(np.array([1.0, 0, 0]), np.array([0.0, 1, 0]), IDENT)
        assert (sx, sy) == (1.0, 1.0)
        v_x, v_y, sx, sy = orient_axes(np.array([-1.0, 0, 0]), np.array([0.0, -1, 0]), IDENT)
        np.testing.assert_allclose(v_x, [1, 0, 0])
        np.testing.assert_allclose(v_y, [0, 1, 0])
        assert (sx, sy) == (-1.0, -1.0)

    @given(seeds)
    def test_orient_postcondition(self, seed):
        rng = np.random.default_rng(seed)
        pose = random_pose(rng)
        r = random_rotation(rng)
        v_x, v_y, _, _ = orient_axes(r[0], r[1], pose)
        assert (pose.rotation.T @ [1, 0, 0]) @ v_x >= 0
        assert (pose.rotation.T @ [0, 1, 0]) @ v_y >= 0


class TestBasis:
    @given(seeds, st.booleans())
    def test_proper_rotation(self, seed, swap):
        rng = np.random.default_rng(seed)
        b = rectifying_basis(random_pose(rng), random_pose(rng), swap_vertical=swap)
        r = b.rotation
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-9)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(b.v_z, np.cross(b.v_x, b.v_y), atol=1e-9)

    def test_swap_flag_only_with_opt_in(self):
        a, b = at([0, 1, 0]), at([0, 0, 0])
        assert rectifying_basis(a, b).vertical and not rectifying_basis(a, b).swap_applied
        assert rectifying_basis(a, b, swap_vertical=True).swap_applied


class TestBuildWarpPair:
    def test_rectified_pair_is_fixed_point(self):
        wp = build_warp_pair(Camera(K64, at([1, 0, 0])), Camera(K64, at([0, 0, 0])))
        np.testing.assert_allclose(wp.w_k, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(wp.w_k2, np.eye(3), atol=1e-9)

    def test_mean_intrinsics_without_framing(self):
        ka = CameraIntrinsics(50, 52, 30, 20, 64, 48)
        kb = CameraIntrinsics(60, 58, 34, 26, 64, 48)
        wp = build_warp_pair(Camera(ka, random_pose(np.random.default_rng(0))),
                             Camera(kb, random_pose(np.random.default_rng(1))), fit_content=False)
        assert (wp.intrinsics.fx, wp.intrinsics.fy, wp.intrinsics.cx, wp.intrinsics.cy) == (55, 55, 32, 23)

    @given(seeds)
    def test_centres_preserved_and_shared_rotation(self, seed):
        rng = np.random.default_rng(seed)
        a, b = config_pair(rng, CONFIGS[seed % 4])
        wp = build_warp_pair(a, b)
        np.testing.assert_allclose(wp.pose_k.centre, a.centre, atol=1e-9)
        np.testing.assert_allclose(wp.pose_k2.centre, b.centre, atol=1e-9)
        np.testing.assert_array_equal(wp.pose_k.rotation, wp.pose_k2.rotation)
        # homography definition W = (K~ R~)(K R)^-1
        for w, cam in ((wp.w_k, a), (wp.w_k2, b)):
            expected = wp.intrinsics.matrix @ wp.rotation @ np.linalg.inv(cam.intrinsics.matrix @ cam.pose.rotation)
            np.testing.assert_allclose(w, expected, atol=1e-9)

    @given(seeds, st.sampled_from(CONFIGS))
    def test_epipolar_rows(self, seed, config):
        rng = np.random.default_rng(seed)
        a, b = config_pair(rng, config)
        pts = covisible_points(rng, a, b)
        drow, front = epipolar_check(build_warp_pair(a, b), a, b, pts)
        assert np.all(drow < 0.5)
        assert np.all(front)

    @pytest.mark.parametrize("name", ["vertical", "horizontal-right"])
    def test_supplementary_failure_cases(self, name):
        a, b = supplementary_pairs()[name]
        pts = covisible_points(np.random.default_rng(0), a, b)
        drow, front = epipolar_check(build_warp_pair(a, b), a, b, pts)
        assert len(pts) == 50 and np.all(drow < 0.5) and np.all(front)

    def test_swapped_vertical_aligns_columns(self):
        a, b = supplementary_pairs()["vertical"]
        wp = build_warp_pair(a, b, swap_vertical=True)
        pts = covisible_points(np.random.default_rng(0), a, b)
        cols = [(wp.camera_k.project(pts)[0][:, 0]), wp.camera_k2.project(pts)[0][:, 0]]
        np.testing.assert_allclose(cols[0], cols[1], atol=1e-6)

    @pytest.mark.parametrize("config", CONFIGS)
    def test_content_stays_in_frame(self, config):
        a, b = config_pair(np.random.default_rng(3), config)
        wp = build_warp_pair(a, b)
        k = wp.intrinsics
        for w in (wp.w_k, wp.w_k2):
            p = np.concatenate([pixel_grid(64, 64).reshape(-1, 2), np.ones((64 * 64, 1))], 1) @ w.T
            uv = p[:, :2] / p[:, 2:]
            assert np.all(p[:, 2] > 0)
            assert np.all((uv >= 0) & (uv <= [k.width, k.height]))


class TestWarpImage:
    def test_identity(self, rng):
        img = rng.random((10, 12, 3))
        out, valid = warp_image(img, np.eye(3), (12, 10))
        np.testing.assert_allclose(out, img, atol=1e-12)
        assert valid.all()

    def test_integer_translation(self, rng):
        img = rng.random((10, 12, 3))
        shift = np.array([[1, 0, 3], [0, 1, 2], [0, 0, 1.0]])
        out, valid = warp_image(img, shift, (12, 10))
        np.testing.assert_allclose(out[2:, 3:], img[:-2, :-3], atol=1e-12)
        assert not valid[:2].any() and not valid[:, :3].any() and valid[2:, 3:].all()

    def test_singular(self):
        with pytest.raises(SingularWarp):
            warp_image(np.zeros((4, 4)), np.zeros((3, 3)), (4, 4))

    def test_round_trip_interior(self, rng):
        yy, xx = np.mgrid[0:48, 0:64] / 64.0
        img = np.stack([0.5 + 0.4 * np.sin(3 * xx), 0.5 + 0.4 * np.cos(2 * yy), xx * yy], -1)
        h = np.array([[1.02, 0.03, 1.5], [-0.02, 0.98, -1.0], [1e-4, -2e-4, 1.0]])
        fwd, m1 = warp_image(img, h, (64, 48))
        back, m2 = warp_image(fwd, np.linalg.inv(h), (64, 48), mask=m1)
        interior = m2.copy()
        interior[:4] = interior[-4:] = False
        interior[:, :4] = interior[:, -4:] = False
        assert interior.sum() > 1000
        assert np.max(np.abs(back - img)[interior]) < 2 / 255

    def test_mask_blocks_invalid_neighbours(self):
        mask = np.ones((6, 6), dtype=bool)
        mask[2, 2] = False
        half = np.array([[1, 0, 0.5], [0, 1, 0.5], [0, 0, 1.0]])
        _, valid = warp_image(np.ones((6, 6)), half, (6, 6), mask=mask)
        assert not valid[2:4, 2:4].any()


class TestWarpDepth:
    def test_identity(self, rng):
        cam_a, cam_b = Camera(K64, at([1, 0, 0])), Camera(K64, at([0, 0, 0]))
        wp = build_warp_pair(cam_a, cam_b)
        depth = rng.uniform(2, 5, (64, 64))
        out, coords, valid = warp_depth(depth, cam_a, wp, "k")
        assert valid.all()
        np.testing.assert_allclose(out, depth, atol=1e-6)

    def test_plane_under_rotation(self):
        cam = Camera(K64, look_at([0, 0, 3], [0.4, 0.2, 0], up=(0, 1, 0)))
        other = Camera(K64, look_at([1.2, 0, 3], [0.6, 0.2, 0], up=(0, 1, 0)))
        # distances to the plane z = 0 along every pixel ray
        _, dirs = cam.pixel_rays()
        depth = -3.0 / dirs[..., 2]
        wp = build_warp_pair(cam, other)
        _, coords, valid = warp_depth(depth, cam, wp, "k")
        assert valid.sum() > 1000
        assert np.max(np.abs(coords[valid][:, 2])) < 1e-5

    def test_mask_propagation_and_nearest_contract(self, rng):
        a, b = config_pair(rng, "horizontal-left")
        depth = rng.uniform(3, 5, (64, 64))
        mask = rng.random((64, 64)) > 0.3
        wp = build_warp_pair(a, b)
        out, coords, valid = warp_depth(depth, a, wp, "k", mask)
        src, src_valid = lift_depth(depth, a, mask)
        pool = {tuple(p) for p in src[src_valid]}
        assert valid.any()
        assert all(tuple(p) in pool for p in coords[valid])
        assert np.all(out[~valid] == 0)
        np.testing.assert_allclose(out[valid], np.linalg.norm(coords[valid] - a.centre, axis=-1), atol=1e-9)

    def test_rectify_pair_shapes(self, rng):
        a, b = config_pair(rng, "vertical-below")
        img = rng.random((64, 64, 3))
        rect = rectify_pair(a, img, np.full((64, 64), 4.0), b, img, np.full((64, 64), 4.0))
        shape = rect.warp.intrinsics.shape
        for arr in rect.images + rect.depths + rect.coords + rect.image_masks + rect.depth_masks:
            assert arr.shape[:2] == shape
