import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose
from mapprior.geometry import (
    CameraModel,
    PointCloud,
    Pose,
    PoseRecord,
    adjoint,
    compose,
    invert,
    project_point,
    read_pose_file,
    se3_exp,
    se3_left_jacobian,
    se3_log,
    surround_rig,
    transform_points,
    write_pose_file,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite)
rotvecs = st.tuples(*[st.floats(-3.0, 3.0)] * 3)


@st.composite
def poses(draw):
    return Pose.from_rotvec(np.array(draw(rotvecs)), np.array(draw(vec3)))


class TestPose:
    def test_quaternion_normalized_and_canonical(self):
        p = Pose([0.0, 0.0, 2.0, -2.0], [1, 2, 3])
        assert abs(np.linalg.norm(p.quat) - 1.0) < 1e-9
        assert p.quat[3] >= 0

    @given(poses())
    def test_rotation_is_proper_orthonormal(self, p):
        R = p.rotation
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(R) - 1.0) < 1e-9

    def test_rejects_degenerate_quaternion(self):
        with pytest.raises(ValueError):
            Pose([0, 0, 0, 0])
        with pytest.raises(ValueError):
            Pose([0, 0, 0, 1], [np.nan, 0, 0])

    def test_immutable(self):
        p = Pose()
        with pytest.raises(ValueError):
            p.translation[0] = 1.0

    def test_compose_identity(self, rng):
        p = random_pose(rng)
        assert compose(Pose.identity(), p).allclose(p, 1e-12)
        assert compose(p, Pose.identity()).allclose(p, 1e-12)

    @given(poses())
    def test_compose_inverse_is_identity(self, p):
        assert compose(p, invert(p)).allclose(Pose.identity(), 1e-9)
        assert compose(invert(p), p).allclose(Pose.identity(), 1e-9)

    def test_associativity(self, rng):
        for _ in range(200):
            a, b, c = (random_pose(rng) for _ in range(3))
            assert compose(compose(a, b), c).allclose(compose(a, compose(b, c)), 1e-9)

    def test_compose_applies_right_operand_first(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        x = rng.normal(size=(5, 3))
        np.testing.assert_allclose(compose(a, b).apply(x), a.apply(b.apply(x)), atol=1e-9)

    def test_invert_identity_and_translation(self):
        assert invert(Pose.identity()).allclose(Pose.identity(), 0.0)
        inv = invert(Pose.from_translation([1.0, -2.0, 3.5]))
        np.testing.assert_array_equal(inv.translation, [-1.0, 2.0, -3.5])
        np.testing.assert_array_equal(inv.quat, [0, 0, 0, 1])

    def test_double_inverse(self, rng):
        for _ in range(200):
            p = random_pose(rng)
            assert invert(invert(p)).allclose(p, 1e-9)

    def test_matrix_round_trip(self, rng):
        p = random_pose(rng)
        assert Pose.from_matrix(p.as_matrix()).allclose(p, 1e-12)

    def test_matmul_operator(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        assert (a @ b).allclose(compose(a, b), 0.0)


class TestLieGroup:
    def test_exp_log_round_trip(self, rng):
        for _ in range(100):
            xi = rng.normal(size=6)
            xi[:3] *= 0.9  # stay away from the angle-pi branch cut
            np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)

    def test_small_angle_branch(self):
        xi = np.array([1e-9, -2e-9, 3e-9, 0.5, -0.2, 1.0])
        np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-12)

    def test_adjoint_identity(self, rng):
        P = random_pose(rng)
        xi = rng.normal(size=6) * 0.3
        lhs = se3_exp(adjoint(P) @ xi)
        rhs = compose(compose(P, se3_exp(xi)), invert(P))
        assert lhs.allclose(rhs, 1e-9)

    def test_left_jacobian_matches_finite_differences(self, rng):
        # Exp(xi + eps) ≈ Exp(J_l(xi) eps) Exp(xi)
        xi = rng.normal(size=6) * 0.7
        J = se3_left_jacobian(xi)
        h = 1e-6
        num = np.zeros((6, 6))
        for i in range(6):
            d = np.zeros(6)
            d[i] = h
            plus = se3_log(compose(se3_exp(xi + d), invert(se3_exp(xi))))
            minus = se3_log(compose(se3_exp(xi - d), invert(se3_exp(xi))))
            num[:, i] = (plus - minus) / (2 * h)
        np.testing.assert_allclose(J, num, atol=1e-8)


class TestTransformPoints:
    def test_identity(self, rng):
        c = PointCloud(rng.normal(size=(10, 3)), np.arange(10), np.linspace(0, 1, 10))
        out = transform_points(Pose.identity(), c)
        np.testing.assert_array_equal(out.positions, c.positions)
        np.testing.assert_array_equal(out.traversal_id, c.traversal_id)
        np.testing.assert_array_equal(out.timestamp, c.timestamp)

    def test_translation(self):
        out = transform_points(Pose.from_translation([1, 2, 3]), PointCloud([[0.0, 0.0, 0.0]]))
        np.testing.assert_array_equal(out.positions, [[1, 2, 3]])

    def test_rotation_is_isometry(self, rng):
        p = Pose.from_rotvec(rng.normal(size=3))
        c = PointCloud(rng.normal(size=(100, 3)) * 20)
        out = transform_points(p, c)
        np.testing.assert_allclose(np.linalg.norm(out.positions, axis=1), np.linalg.norm(c.positions, axis=1),
                                   atol=1e-9)

    def test_round_trip(self, rng):
        for _ in range(50):
            p = random_pose(rng, trans_scale=100)
            c = PointCloud(rng.normal(size=(200, 3)) * 50)
            back = transform_points(invert(p), transform_points(p, c))
            np.testing.assert_allclose(back.positions, c.positions, atol=1e-7, rtol=0)

    def test_pure(self, rng):
        p = random_pose(rng)
        c = PointCloud(rng.normal(size=(50, 3)))
        assert transform_points(p, c).positions.tobytes() == transform_points(p, c).positions.tobytes()


class TestPointCloud:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            PointCloud([[0, 0, np.inf]])

    def test_attribute_length_checked(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((3, 3)), traversal_id=[1, 2])
        with pytest.raises(ValueError):
            PointCloud(np.zeros((3, 3)), timestamp=[1.0])

    def test_concat_keeps_attributes_only_when_all_have_them(self):
        a = PointCloud(np.zeros((2, 3)), [1, 1], [0.0, 0.0])
        b = PointCloud(np.ones((1, 3)))
        assert PointCloud.concat([a, a]).traversal_id is not None
        assert PointCloud.concat([a, b]).traversal_id is None


class TestProjection:
    def test_principal_axis(self, pinhole):
        assert project_point(pinhole, (0, 0, 10)) == (320.0, 240.0, 10.0)

    def test_pinhole_arithmetic(self, pinhole):
        u, v, d = project_point(pinhole, (1, 0, 10))
        assert abs(u - 330.0) < 1e-6 and abs(v - 240.0) < 1e-6 and d == 10.0

    def test_behind_camera(self, pinhole):
        assert project_point(pinhole, (0, 0, -5)) is None

    def test_near_plane(self, pinhole):
        assert project_point(pinhole, (0, 0, 1e-3)) is None
        assert project_point(pinhole, (0, 0, 2e-3)) is not None

    def test_outside_image(self, pinhole):
        assert project_point(pinhole, (40, 0, 10)) is None  # u = 720
        assert project_point(pinhole, (-32.0, 0, 10)) == (0.0, 240.0, 10.0)
        assert project_point(pinhole, (32.0, 0, 10)) is None  # u = 640 is past the last column

    def test_scale_consistency(self, rng):
        cam = CameraModel(500.0, 480.0, 320.0, 240.0, 640, 480)
        for _ in range(200):
            p = np.array([rng.uniform(-3, 3), rng.uniform(-2, 2), rng.uniform(2, 20)])
            s = rng.uniform(0.1, 10)
            a, b = project_point(cam, p), project_point(cam, s * p)
            if a is None:
                continue
            assert abs(a[0] - b[0]) < 1e-6 and abs(a[1] - b[1]) < 1e-6
            assert abs(b[2] - s * a[2]) < 1e-9 * s * a[2]

    def test_extrinsic_is_applied(self):
        ext = Pose.from_translation([0.0, 0.0, -5.0])
        cam = CameraModel(100.0, 100.0, 50.0, 50.0, 100, 100, ext)
        assert project_point(cam, (0, 0, 10)) == (50.0, 50.0, 5.0)

    def test_surround_rig_front_camera_sees_forward(self):
        front = surround_rig()[0]
        u, v, d = project_point(front, (20.0, 0.0, 1.6))
        assert abs(u - front.cx) < 1e-9 and abs(v - front.cy) < 1e-9 and abs(d - 19.0) < 1e-9
        # +y in ego (left) appears at smaller u
        u_left, _, _ = project_point(front, (20.0, 2.0, 1.6))
        assert u_left < u

    def test_invalid_camera(self):
        with pytest.raises(ValueError):
            CameraModel(0.0, 1.0, 1.0, 1.0, 10, 10)
        with pytest.raises(ValueError):
            CameraModel(1.0, 1.0, 10.0, 1.0, 10, 10)

    def test_camera_dict_round_trip(self):
        cam = surround_rig()[2]
        back = CameraModel.from_dict(cam.to_dict())
        assert back.extrinsic.allclose(cam.extrinsic, 1e-15) and back.fx == cam.fx and back.name == cam.name


def test_pose_file_round_trip(tmp_path, rng):
    recs = [PoseRecord("seqA", k, 1700000000.0 + 0.1 * k, random_pose(rng)) for k in range(5)]
    path = tmp_path / "poses.txt"
    write_pose_file(path, recs)
    back = read_pose_file(path)
    assert [(r.sequence_id, r.frame_id, r.timestamp) for r in back] == [
        (r.sequence_id, r.frame_id, r.timestamp) for r in recs]
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(a.pose.as_array(), b.pose.as_array())


def test_pose_file_rejects_short_lines(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("seq 0 0.0 0 0 0 1 1 2\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        read_pose_file(path)


@settings(max_examples=50)
@given(poses(), st.lists(vec3, min_size=1, max_size=20))
def test_round_trip_property(p, pts):
    c = PointCloud(np.array(pts))
    back = transform_points(invert(p), transform_points(p, c))
    np.testing.assert_allclose(back.positions, c.positions, atol=1e-7, rtol=0)
