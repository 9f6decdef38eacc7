import numpy as np
import pytest

from poseprior.errors import BehindCameraError
from poseprior.geometry import (
    ABSOLUTE_CAMERA,
    ROOT_RELATIVE,
    Camera,
    Pose,
    RootEstimate,
    project,
    projection_jacobian,
    sample_root,
    to_absolute,
    to_root_relative,
)
from poseprior.numeric import RngStream

CAM = Camera(fx=1000.0, fy=1000.0, cx=500.0, cy=500.0)


def random_rel_pose(rng, joints=5):
    arr = 100.0 * rng.standard_normal((joints, 3))
    arr[0] = 0.0
    return Pose(arr, ROOT_RELATIVE)


class TestProject:
    def test_optical_axis(self):
        for z in (1.0, 10.0, 5000.0):
            assert np.allclose(project(np.array([0.0, 0.0, z]), CAM), [500.0, 500.0])

    def test_hand_case(self):
        out = project(np.array([100.0, -50.0, 1000.0]), CAM)
        assert np.allclose(out, [600.0, 450.0])

    def test_ray_invariance(self):
        p = np.array([120.0, 45.0, 900.0])
        base = project(p, CAM)
        for k in (0.5, 2.0, 17.0):
            assert np.allclose(project(k * p, CAM), base)

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project(np.array([1.0, 1.0, 0.0]), CAM)
        with pytest.raises(BehindCameraError):
            project(np.array([1.0, 1.0, -5.0]), CAM)

    def test_camera_validation(self):
        with pytest.raises(ValueError):
            Camera(fx=-1.0, fy=1.0, cx=0.0, cy=0.0)


class TestProjectionJacobian:
    def test_on_axis(self):
        jac = projection_jacobian(np.array([0.0, 0.0, 2000.0]), CAM)
        assert np.allclose(jac, [[0.5, 0.0, 0.0], [0.0, 0.5, 0.0]])

    def test_matches_finite_differences(self):
        rng = RngStream(21, 0)
        h = 1e-3
        for _ in range(1000):
            p = np.array([
                rng.uniform(-2000, 2000),
                rng.uniform(-2000, 2000),
                rng.uniform(500, 8000),
            ])
            jac = projection_jacobian(p, CAM)
            for k in range(3):
                dp = np.zeros(3)
                dp[k] = h
                fd = (project(p + dp, CAM) - project(p - dp, CAM)) / (2 * h)
                assert np.allclose(jac[:, k], fd, rtol=1e-6, atol=1e-9)

    def test_full_row_rank(self):
        rng = RngStream(22, 0)
        for _ in range(50):
            p = np.array([rng.uniform(-500, 500), rng.uniform(-500, 500), rng.uniform(100, 9000)])
            assert np.linalg.matrix_rank(projection_jacobian(p, CAM)) == 2

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            projection_jacobian(np.array([0.0, 0.0, -1.0]), CAM)


class TestFrames:
    def test_root_maps_to_origin(self):
        abs_pose = Pose(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]), ABSOLUTE_CAMERA)
        rel = to_root_relative(abs_pose)
        assert np.array_equal(rel.joints[0], np.zeros(3))
        assert rel.frame == ROOT_RELATIVE

    def test_round_trip(self):
        rng = RngStream(23, 0)
        rel = random_rel_pose(rng)
        root = np.array([10.0, -20.0, 4000.0])
        back = to_root_relative(to_absolute(rel, root))
        assert np.allclose(back.joints, rel.joints, atol=1e-9)

    def test_distances_preserved(self):
        rng = RngStream(24, 0)
        abs_pose = Pose(4000.0 + 100.0 * rng.standard_normal((6, 3)), ABSOLUTE_CAMERA)
        rel = to_root_relative(abs_pose)
        d_abs = np.linalg.norm(abs_pose.joints[:, None] - abs_pose.joints[None], axis=-1)
        d_rel = np.linalg.norm(rel.joints[:, None] - rel.joints[None], axis=-1)
        assert np.allclose(d_abs, d_rel)

    def test_depth_shift(self):
        rng = RngStream(25, 0)
        rel = random_rel_pose(rng)
        root = np.array([0.0, 0.0, 3000.0])
        assert np.allclose(to_absolute(rel, root).joints[:, 2] - rel.joints[:, 2], 3000.0)

    def test_zero_root_is_identity_up_to_tag(self):
        rng = RngStream(26, 0)
        rel = random_rel_pose(rng)
        out = to_absolute(rel, np.zeros(3))
        assert np.array_equal(out.joints, rel.joints)
        assert out.frame == ABSOLUTE_CAMERA

    def test_pose_invariants(self):
        with pytest.raises(ValueError):
            Pose(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]), ROOT_RELATIVE)
        with pytest.raises(ValueError):
            Pose(np.full((2, 3), np.nan), ABSOLUTE_CAMERA)
        with pytest.raises(ValueError):
            Pose(np.zeros((2, 2)), ROOT_RELATIVE)


class TestSampleRoot:
    def test_zero_cov(self):
        est = RootEstimate(np.array([1.0, 2.0, 3.0]), np.zeros(3))
        assert np.array_equal(sample_root(est, RngStream(1, 0)), est.mean)

    def test_moments(self):
        est = RootEstimate(np.array([0.0, 0.0, 4000.0]), np.array([100.0, 400.0, 2500.0]))
        rng = RngStream(2, 0)
        draws = np.stack([sample_root(est, rng) for _ in range(100_000)])
        assert np.allclose(draws.mean(axis=0), est.mean, atol=0.02 * np.sqrt(2500.0) * 3)
        assert np.allclose(draws.var(axis=0), est.cov, rtol=0.02)

    def test_deterministic(self):
        est = RootEstimate(np.zeros(3), np.ones(3))
        assert np.array_equal(
            sample_root(est, RngStream(9, 5)), sample_root(est, RngStream(9, 5)))

    def test_validation(self):
        with pytest.raises(ValueError):
            RootEstimate(np.zeros(3), np.array([1.0, -1.0, 1.0]))
