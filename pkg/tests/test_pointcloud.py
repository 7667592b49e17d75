import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from baroicp.errors import InvalidInputError, NoOverlapError
from baroicp.pointcloud import (
    PointCloud,
    RigidTransform,
    SpatialIndex,
    estimate_normals,
    gravity_align,
    gravity_rotation,
    match,
    rot_z,
)


def brute_force_nn(reading, reference):
    d = np.linalg.norm(reading[:, None, :] - reference[None, :, :], axis=2)
    j = d.argmin(axis=1)
    return j, d[np.arange(len(reading)), j]


def random_rotation(rng):
    return Rotation.random(random_state=rng).as_matrix()


unit_vectors = st.tuples(
    st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)
).filter(lambda v: 1e-3 < np.linalg.norm(v)).map(lambda v: np.array(v) / np.linalg.norm(v))


class TestRigidTransform:
    def test_rejects_non_rotation(self):
        with pytest.raises(InvalidInputError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        with pytest.raises(InvalidInputError):
            RigidTransform(2 * np.eye(3), np.zeros(3))

    def test_compose_and_inverse(self):
        rng = np.random.default_rng(1)
        a = RigidTransform(random_rotation(rng), rng.normal(size=3))
        b = RigidTransform(random_rotation(rng), rng.normal(size=3))
        pts = rng.normal(size=(10, 3))
        np.testing.assert_allclose((a @ b).apply(pts), a.apply(b.apply(pts)), atol=1e-12)
        np.testing.assert_allclose(a.inverse().apply(a.apply(pts)), pts, atol=1e-12)
        np.testing.assert_allclose(RigidTransform.from_matrix(a.as_matrix()).as_matrix(), a.as_matrix())

    def test_yaw(self):
        assert RigidTransform.from_yaw(0.3).yaw == pytest.approx(0.3)


class TestPointCloud:
    def test_rejects_bad_normals(self):
        with pytest.raises(InvalidInputError):
            PointCloud(np.zeros((2, 3)), np.ones((2, 3)))
        with pytest.raises(InvalidInputError):
            PointCloud(np.zeros((2, 3)), np.array([[0, 0, 1.0]]))
        with pytest.raises(InvalidInputError):
            PointCloud([[0, 0, math.nan]])
        with pytest.raises(InvalidInputError):
            PointCloud(np.zeros((1, 3)), frame="world")

    def test_concatenate(self):
        a = PointCloud(np.zeros((2, 3)), np.tile([0, 0, 1.0], (2, 1)))
        b = PointCloud(np.ones((3, 3)), np.tile([1.0, 0, 0], (3, 1)))
        c = PointCloud.concatenate([a, b])
        assert len(c) == 5 and c.has_normals


class TestNormals:
    def test_plane(self):
        rng = np.random.default_rng(0)
        pts = np.column_stack([rng.uniform(-5, 5, 300), rng.uniform(-5, 5, 300), np.zeros(300)])
        out = estimate_normals(PointCloud(pts), k=10)
        np.testing.assert_allclose(np.abs(out.normals[:, 2]), 1.0, atol=1e-6)
        assert out.valid.all()

    def test_perpendicular_walls(self):
        rng = np.random.default_rng(2)
        n = 400
        wall_x = np.column_stack([np.full(n, 3.0), rng.uniform(0, 6, n), rng.uniform(0, 3, n)])
        wall_y = np.column_stack([rng.uniform(-6, 0, n), np.full(n, 6.0), rng.uniform(0, 3, n)])
        out = estimate_normals(PointCloud(np.vstack([wall_x, wall_y])), k=10)
        labels = np.r_[np.zeros(n), np.ones(n)]
        # a point near the shared edge may see both walls; everything else must follow its generator
        interior = np.r_[wall_x[:, 1] > 0.5, wall_y[:, 0] < -0.5]
        along_x = np.abs(out.normals[:, 0]) > 0.999
        along_y = np.abs(out.normals[:, 1]) > 0.999
        assert np.all(along_x[interior & (labels == 0)])
        assert np.all(along_y[interior & (labels == 1)])

    def test_faces_viewpoint(self):
        rng = np.random.default_rng(4)
        pts = np.column_stack([rng.uniform(-5, 5, 200), rng.uniform(-5, 5, 200), np.full(200, -1.5)])
        out = estimate_normals(PointCloud(pts), k=8)
        np.testing.assert_allclose(out.normals[:, 2], 1.0, atol=1e-6)

    def test_collinear_points_flagged(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0.0]])
        out = estimate_normals(PointCloud(pts), k=3)
        assert not out.valid.any()
        np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0)

    def test_preconditions(self):
        with pytest.raises(InvalidInputError):
            estimate_normals(PointCloud(np.zeros((3, 3))), k=3)
        with pytest.raises(InvalidInputError):
            estimate_normals(PointCloud(np.random.default_rng(0).normal(size=(20, 3))), k=2)

    def test_invariant_under_rigid_motion(self):
        rng = np.random.default_rng(8)
        # a curved surface so every neighbourhood has a well-defined normal
        xy = rng.uniform(-3, 3, (500, 2))
        pts = np.column_stack([xy, 0.1 * xy[:, 0] ** 2 - 0.05 * xy[:, 1] ** 2 + 4.0])
        T = RigidTransform(random_rotation(rng), rng.normal(size=3))
        before = estimate_normals(PointCloud(pts), k=10)
        after = estimate_normals(PointCloud(T.apply(pts)), k=10)
        rotated = T.rotate(before.normals)
        dots = np.abs(np.einsum("ij,ij->i", rotated, after.normals))
        np.testing.assert_allclose(dots, 1.0, atol=1e-6)


class TestGravity:
    def test_vertical_gravity_is_identity(self):
        np.testing.assert_array_equal(gravity_rotation([0, 0, -1.0]), np.eye(3))

    def test_gravity_along_x(self):
        C = gravity_rotation([1.0, 0, 0])
        np.testing.assert_allclose(C @ [1.0, 0, 0], [0, 0, -1.0], atol=1e-12)
        # quarter turn about +y
        np.testing.assert_allclose(C, Rotation.from_rotvec([0, math.pi / 2, 0]).as_matrix(), atol=1e-12)

    def test_antiparallel_uses_x_axis(self):
        C = gravity_rotation([0, 0, 1.0])
        np.testing.assert_allclose(C, np.diag([1.0, -1.0, -1.0]), atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(g=unit_vectors)
    def test_random_gravity_maps_down_minimally(self, g):
        C = gravity_rotation(g)
        np.testing.assert_allclose(C @ g, [0, 0, -1.0], atol=1e-9)
        angle = Rotation.from_matrix(C).magnitude()
        assert angle == pytest.approx(math.acos(np.clip(g @ [0, 0, -1.0], -1, 1)), abs=1e-7)

    def test_align_is_isometry(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(50, 3))
        g = rng.normal(size=3)
        g /= np.linalg.norm(g)
        out, T = gravity_align(PointCloud(pts, frame="sensor"), g)
        assert out.frame == "gravity_aligned"
        d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        d1 = np.linalg.norm(out.points[:, None] - out.points[None], axis=2)
        np.testing.assert_allclose(d1, d0, atol=1e-9)
        np.testing.assert_allclose(T.translation, 0.0)

    def test_rejects_non_unit(self):
        with pytest.raises(InvalidInputError):
            gravity_rotation([0, 0, -2.0])


class TestMatch:
    def test_identical_clouds(self):
        pts = np.random.default_rng(0).normal(size=(100, 3))
        corr = match(PointCloud(pts), PointCloud(pts), max_dist=math.inf)
        np.testing.assert_array_equal(corr.pairs[:, 0], corr.pairs[:, 1])
        np.testing.assert_array_equal(corr.distances, 0.0)

    def test_shifted_grid(self):
        g = np.arange(0, 2.0001, 0.05)
        ref = np.stack(np.meshgrid(g, g, g), axis=-1).reshape(-1, 3)
        rng = np.random.default_rng(1)
        reading = rng.uniform(0.2, 1.8, (200, 3)) + [0.1, 0, 0]
        corr = match(PointCloud(reading), PointCloud(ref), max_dist=math.inf)
        j, d = brute_force_nn(reading, ref)
        np.testing.assert_allclose(corr.distances, d, atol=1e-12)
        assert corr.distances.max() <= 0.05 * math.sqrt(3) / 2 + 1e-12

    def test_zero_radius_on_distinct_clouds(self):
        with pytest.raises(NoOverlapError):
            match(PointCloud(np.zeros((3, 3))), PointCloud(np.ones((3, 3))), max_dist=0.0)

    def test_frame_mismatch(self):
        with pytest.raises(InvalidInputError):
            match(PointCloud(np.zeros((3, 3)), frame="map"), PointCloud(np.ones((3, 3))))

    @pytest.mark.parametrize("n", [10, 500, 2000])
    def test_against_brute_force(self, n):
        rng = np.random.default_rng(n)
        ref = rng.uniform(-10, 10, (n, 3))
        reading = rng.uniform(-10, 10, (n, 3))
        corr = match(PointCloud(reading), PointCloud(ref), max_dist=math.inf)
        j, d = brute_force_nn(reading, ref)
        np.testing.assert_array_equal(corr.pairs[:, 1], j)
        np.testing.assert_allclose(corr.distances, d, rtol=1e-12)

    def test_max_dist_drops_pairs_and_skips_invalid(self):
        ref = PointCloud(np.array([[0, 0, 0.0], [10, 0, 0]]), valid=[True, False])
        reading = PointCloud(np.array([[0.1, 0, 0], [9.9, 0, 0], [0.2, 0, 0]]), valid=[True, True, False])
        corr = SpatialIndex(ref).match(reading, max_dist=1.0)
        np.testing.assert_array_equal(corr.pairs, [[0, 0]])


def test_rot_z_is_rotation():
    C = rot_z(0.7)
    np.testing.assert_allclose(C @ C.T, np.eye(3), atol=1e-15)
