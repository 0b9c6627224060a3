"""Projection geometry against hand-computed pinhole and interpolation oracles."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mvhead.cameras import (
    Intrinsics,
    build_voxel_grid,
    frustum_ray_points,
    pose_from_angles,
    project,
    sample_view_features,
    scale_intrinsics,
    trilinear_sample_volume,
    world_to_grid,
)

INTR = Intrinsics(focal=100.0, cx=32.0, cy=32.0, width=64, height=64)


class TestPoseFromAngles:
    def test_frontal_convention_anchor(self):
        pose = pose_from_angles(0.0, 0.0, 2.0)
        np.testing.assert_allclose(pose.camera_center, [0, 0, 2], atol=1e-15)
        # forward (third rotation row) points from camera to origin: -z
        np.testing.assert_allclose(pose.rotation[2], [0, 0, -1], atol=1e-15)

    def test_back_view_center(self):
        pose = pose_from_angles(180.0, 0.0, 2.0)
        np.testing.assert_allclose(pose.camera_center, [0, 0, -2], atol=1e-12)

    def test_radius_validation(self):
        with pytest.raises(ValueError):
            pose_from_angles(0.0, 0.0, 0.0)

    def test_poles_are_well_defined(self):
        for el in (90.0, -90.0):
            pose = pose_from_angles(30.0, el, 1.5)
            r = pose.rotation
            np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)

    @given(
        az=st.floats(-180, 180),
        el=st.floats(-89, 89),
        radius=st.floats(0.1, 50),
    )
    @settings(max_examples=80, deadline=None)
    def test_rotation_orthonormal_det_one(self, az, el, radius):
        pose = pose_from_angles(az, el, radius)
        r = pose.rotation
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-10)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-10)
        assert np.linalg.norm(pose.camera_center) == pytest.approx(radius, rel=1e-10)
        # looking at the origin: it sits on the +z camera axis at distance radius
        origin_cam = pose.world_to_camera(np.zeros(3))
        np.testing.assert_allclose(origin_cam[:2], 0, atol=1e-9 * radius)
        assert origin_cam[2] == pytest.approx(radius, rel=1e-10)


class TestProject:
    def test_principal_point_anchor(self):
        pose = pose_from_angles(0.0, 0.0, 2.0)
        p = project(np.zeros(3), pose, INTR)
        assert p.in_frustum
        assert (p.u, p.v, p.depth) == pytest.approx((32.0, 32.0, 2.0), abs=1e-12)

    def test_pinhole_arithmetic_anchor(self):
        # u = 32 + 100 * 0.1 / 2 = 37
        pose = pose_from_angles(0.0, 0.0, 2.0)
        p = project(np.array([0.1, 0.0, 0.0]), pose, INTR)
        assert p.u == pytest.approx(37.0, abs=1e-12)
        assert p.v == pytest.approx(32.0, abs=1e-12)

    def test_behind_camera_flagged(self):
        pose = pose_from_angles(0.0, 0.0, 2.0)
        p = project(np.array([0.0, 0.0, 5.0]), pose, INTR)
        assert not p.in_frustum
        assert math.isnan(p.u) and math.isnan(p.v)
        assert p.depth < 0

    def test_ninety_degree_symmetry(self):
        # A point rotated with the camera keeps identical pixel coordinates.
        point = np.array([0.2, 0.1, 0.3])
        rot_y = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
        a = project(point, pose_from_angles(0.0, 0.0, 2.0), INTR)
        b = project(rot_y @ point, pose_from_angles(90.0, 0.0, 2.0), INTR)
        assert (a.u, a.v, a.depth) == pytest.approx((b.u, b.v, b.depth), abs=1e-9)


class TestIntrinsics:
    def test_validation(self):
        with pytest.raises(ValueError):
            Intrinsics(focal=0.0, cx=1, cy=1, width=4, height=4)
        with pytest.raises(ValueError):
            Intrinsics(focal=1.0, cx=9, cy=1, width=4, height=4)

    def test_scale_preserves_pixel_centers(self):
        pose = pose_from_angles(15.0, 5.0, 2.0)
        half = scale_intrinsics(INTR, 0.5)
        assert (half.width, half.height) == (32, 32)
        p_full = project(np.array([0.13, -0.07, 0.02]), pose, INTR)
        p_half = project(np.array([0.13, -0.07, 0.02]), pose, half)
        assert p_half.u == pytest.approx((p_full.u + 0.5) * 0.5 - 0.5, abs=1e-12)
        assert p_half.v == pytest.approx((p_full.v + 0.5) * 0.5 - 0.5, abs=1e-12)

    def test_scale_collapse_rejected(self):
        with pytest.raises(ValueError):
            scale_intrinsics(INTR, 0.001)


class TestVoxelGrid:
    def test_corner_only_grid(self):
        grid = build_voxel_grid(2, 1.0)
        verts = grid.vertices
        assert verts.shape == (8, 3)
        expected = {tuple(s) for s in np.stack(np.meshgrid(*[[-1, 1]] * 3)).reshape(3, -1).T}
        assert {tuple(v) for v in verts} == expected

    def test_midpoint_grid(self):
        grid = build_voxel_grid(3, 1.0)
        assert any(np.allclose(v, 0) for v in grid.vertices)
        assert grid.vertices.shape == (27, 3)

    @given(size=st.integers(2, 33), extent=st.floats(0.1, 10))
    @settings(max_examples=40, deadline=None)
    def test_spacing_exact(self, size, extent):
        grid = build_voxel_grid(size, extent)
        assert grid.spacing == 2 * extent / (size - 1)
        diffs = np.diff(grid.axis_coords)
        np.testing.assert_allclose(diffs, grid.spacing, rtol=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            build_voxel_grid(1)
        with pytest.raises(ValueError):
            build_voxel_grid(4, 0.0)

    def test_vertex_index_order(self):
        grid = build_voxel_grid(3, 1.0)
        c = grid.axis_coords
        i, j, k = 2, 0, 1
        np.testing.assert_array_equal(
            grid.vertices[(i * 3 + j) * 3 + k], [c[i], c[j], c[k]]
        )


def _bilinear_oracle(features, u, v):
    """Plain-python bilinear interpolation with zero fill outside support."""
    c, h, w = features.shape
    if not (0 <= u <= w - 1 and 0 <= v <= h - 1):
        return np.zeros(c)
    j0 = min(int(math.floor(u)), w - 2)
    i0 = min(int(math.floor(v)), h - 2)
    fu, fv = u - j0, v - i0
    return (
        (1 - fu) * (1 - fv) * features[:, i0, j0]
        + fu * (1 - fv) * features[:, i0, j0 + 1]
        + (1 - fu) * fv * features[:, i0 + 1, j0]
        + fu * fv * features[:, i0 + 1, j0 + 1]
    )


class TestSampleViewFeatures:
    def test_constant_map_fills_constant(self):
        grid = build_voxel_grid(4, 0.3)
        pose = pose_from_angles(0.0, 0.0, 2.0)
        features = torch.full((2, 16, 16), 3.25, dtype=torch.float64)
        intr = Intrinsics(focal=16.0, cx=7.5, cy=7.5, width=16, height=16)
        volume, validity = sample_view_features(features, pose, intr, grid)
        assert validity.min() == 1.0  # small grid, everything lands in view
        torch.testing.assert_close(
            volume, torch.full_like(volume, 3.25), rtol=0, atol=1e-12
        )

    def test_exact_pixel_center_alignment(self):
        # focal 6, cx=cy=3.5, camera at z=2: vertex (0.5, 0.5, 0) lands exactly
        # on pixel center (u, v) = (5, 2).
        grid = build_voxel_grid(5, 1.0)
        pose = pose_from_angles(0.0, 0.0, 2.0)
        intr = Intrinsics(focal=6.0, cx=3.5, cy=3.5, width=8, height=8)
        check = project(np.array([0.5, 0.5, 0.0]), pose, intr)
        assert (check.u, check.v) == pytest.approx((5.0, 2.0), abs=1e-12)
        features = torch.randn(3, 8, 8, dtype=torch.float64)
        volume, _ = sample_view_features(features, pose, intr, grid)
        torch.testing.assert_close(
            volume[:, 3, 3, 2], features[:, 2, 5], rtol=0, atol=1e-7
        )

    def test_behind_camera_zero_filled(self):
        grid = build_voxel_grid(5, 1.0)
        pose = pose_from_angles(0.0, 0.0, 0.5)  # camera inside the grid
        intr = Intrinsics(focal=8.0, cx=3.5, cy=3.5, width=8, height=8)
        features = torch.ones(1, 8, 8, dtype=torch.float64)
        volume, validity = sample_view_features(features, pose, intr, grid)
        behind = grid.vertices[:, 2] >= 0.5
        assert behind.any()
        flat_vol = volume.reshape(1, -1).T.numpy()
        flat_val = validity.reshape(-1).numpy()
        assert np.all(flat_vol[behind] == 0)
        assert np.all(flat_val[behind] == 0)

    def test_matches_analytic_oracle(self):
        grid = build_voxel_grid(6, 0.9)
        pose = pose_from_angles(35.0, -10.0, 2.2)
        intr = Intrinsics(focal=10.0, cx=5.5, cy=5.5, width=12, height=12)
        features = torch.randn(4, 12, 12, dtype=torch.float64)
        volume, validity = sample_view_features(features, pose, intr, grid)
        fnp = features.numpy()
        for idx, vert in enumerate(grid.vertices):
            p = project(vert, pose, intr)
            expected = (
                _bilinear_oracle(fnp, p.u, p.v) if p.in_frustum else np.zeros(4)
            )
            i, j, k = np.unravel_index(idx, (6, 6, 6))
            np.testing.assert_allclose(
                volume[:, i, j, k].numpy(), expected, atol=1e-6
            )

    def test_differentiable_in_features(self):
        grid = build_voxel_grid(3, 0.4)
        pose = pose_from_angles(0.0, 0.0, 2.0)
        intr = Intrinsics(focal=8.0, cx=3.5, cy=3.5, width=8, height=8)
        features = torch.randn(2, 8, 8, dtype=torch.float64, requires_grad=True)
        volume, _ = sample_view_features(features, pose, intr, grid)
        volume.sum().backward()
        assert features.grad is not None
        assert float(features.grad.abs().sum()) > 0

    def test_nonfinite_features_rejected(self):
        grid = build_voxel_grid(3, 0.4)
        pose = pose_from_angles(0.0, 0.0, 2.0)
        intr = Intrinsics(focal=8.0, cx=3.5, cy=3.5, width=8, height=8)
        bad = torch.full((1, 8, 8), math.nan)
        with pytest.raises(ValueError):
            sample_view_features(bad, pose, intr, grid)


class TestTrilinearSample:
    def test_exact_at_vertices(self):
        grid = build_voxel_grid(4, 1.0)
        volume = torch.randn(3, 4, 4, 4, dtype=torch.float64)
        verts = torch.as_tensor(grid.vertices, dtype=torch.float64)
        out = trilinear_sample_volume(volume, verts, grid)
        expected = volume.reshape(3, -1).T
        torch.testing.assert_close(out, expected, rtol=0, atol=1e-12)

    def test_matches_manual_oracle(self):
        grid = build_voxel_grid(5, 1.0)
        volume = torch.randn(2, 5, 5, 5, dtype=torch.float64)
        rng = np.random.default_rng(4)
        pts = rng.uniform(-1, 1, size=(40, 3))
        out = trilinear_sample_volume(
            volume, torch.as_tensor(pts, dtype=torch.float64), grid
        )
        vnp = volume.numpy()
        for n, p in enumerate(pts):
            g = (p + 1.0) / grid.spacing
            base = np.minimum(np.floor(g).astype(int), grid.size - 2)
            f = g - base
            acc = np.zeros(2)
            for corner in range(8):
                db = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
                wgt = 1.0
                for ax in range(3):
                    wgt *= f[ax] if db[ax] else 1 - f[ax]
                acc += wgt * vnp[:, base[0] + db[0], base[1] + db[1], base[2] + db[2]]
            np.testing.assert_allclose(out[n].numpy(), acc, atol=1e-12)

    def test_zero_outside_extent(self):
        grid = build_voxel_grid(4, 1.0)
        volume = torch.ones(1, 4, 4, 4)
        pts = torch.tensor([[1.5, 0.0, 0.0], [0.0, -2.0, 0.0]])
        out = trilinear_sample_volume(volume, pts, grid)
        assert float(out.abs().max()) == 0.0

    def test_gradcheck(self):
        grid = build_voxel_grid(3, 1.0)
        volume = torch.randn(2, 3, 3, 3, dtype=torch.float64, requires_grad=True)
        pts = torch.tensor([[0.1, -0.2, 0.4], [0.9, 0.9, -0.9]], dtype=torch.float64)
        assert torch.autograd.gradcheck(
            lambda v: trilinear_sample_volume(v, pts, grid), (volume,)
        )

    def test_world_to_grid_centers(self):
        grid = build_voxel_grid(5, 1.0)
        g = world_to_grid(torch.tensor([[-1.0, 0.0, 1.0]]), grid)
        torch.testing.assert_close(g, torch.tensor([[0.0, 2.0, 4.0]]), rtol=0, atol=1e-12)


class TestFrustumRayPoints:
    def test_depth_ladder_in_bounds(self):
        pose = pose_from_angles(20.0, 10.0, 2.0)
        pts, depths = frustum_ray_points(pose, INTR, 5, 0.5, 3.0, 8, 8)
        assert pts.shape == (5, 8, 8, 3)
        torch.testing.assert_close(depths, torch.linspace(0.5, 3.0, 5), rtol=0, atol=0)
        assert float(depths.min()) >= 0.5 and float(depths.max()) <= 3.0

    def test_points_reproject_onto_their_rays(self):
        pose = pose_from_angles(-40.0, 15.0, 2.0)
        out_h = out_w = 4
        pts, depths = frustum_ray_points(
            pose, INTR, 3, 0.8, 3.0, out_h, out_w, dtype=torch.float64
        )
        sx = out_w / INTR.width
        for d in range(3):
            for i in range(out_h):
                for j in range(out_w):
                    p = project(pts[d, i, j].numpy(), pose, INTR)
                    assert p.in_frustum
                    assert p.depth == pytest.approx(float(depths[d]), abs=1e-9)
                    assert p.u == pytest.approx((j + 0.5) / sx - 0.5, abs=1e-8)
                    assert p.v == pytest.approx((i + 0.5) / sx - 0.5, abs=1e-8)

    def test_validation(self):
        pose = pose_from_angles(0.0, 0.0, 2.0)
        with pytest.raises(ValueError):
            frustum_ray_points(pose, INTR, 1, 0.5, 3.0, 4, 4)
        with pytest.raises(ValueError):
            frustum_ray_points(pose, INTR, 4, 0.0, 3.0, 4, 4)
        with pytest.raises(ValueError):
            frustum_ray_points(pose, INTR, 4, 3.0, 0.5, 4, 4)
