"""Projection geometry against explicit homogeneous-matrix oracles."""

import numpy as np
import pytest

import cdrecon.camera as cam
from cdrecon.errors import InvalidArgumentError


def random_pose(rng):
    # rotation via QR of a random matrix, fixed to det +1
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return cam.Pose(q.T, rng.normal(size=3))


def default_k(w=128, h=96, f=100.0):
    return cam.Intrinsics(f, f, w / 2, h / 2, w, h)


def project_matrix_oracle(p, k, pose):
    """Independent projection via 4x4 homogeneous composition."""
    m = np.eye(4)
    m[:3, :3] = pose.r
    m[:3, 3] = pose.t
    ph = m @ np.append(p, 1.0)
    z = ph[2]
    uvw = k.matrix() @ ph[:3]
    return uvw[0] / z, uvw[1] / z, z


class TestProject:
    def test_optical_axis(self):
        k = cam.Intrinsics(100, 100, 50, 50, 100, 100)
        u, v, z, ok = cam.project(np.array([0.0, 0.0, 1.0]), k, cam.Pose.identity())
        assert ok[0] and abs(u[0] - 50) < 1e-12 and abs(v[0] - 50) < 1e-12 and abs(z[0] - 1) < 1e-12

    def test_behind_camera_flag(self):
        k = default_k()
        _, _, _, ok = cam.project(np.array([0.0, 0.0, -1.0]), k, cam.Pose.identity())
        assert not ok[0]

    def test_matches_matrix_oracle(self):
        rng = np.random.default_rng(0)
        k = default_k()
        for _ in range(50):
            pose = random_pose(rng)
            p = rng.normal(size=3) * 2
            u, v, z, ok = cam.project(p, k, pose)
            uo, vo, zo = project_matrix_oracle(p, k, pose)
            if zo > 0:
                assert ok[0]
                assert max(abs(u[0] - uo), abs(v[0] - vo), abs(z[0] - zo)) < 1e-9


class TestBackproject:
    def test_principal_point_identity_pose(self):
        k = default_k()
        p = cam.backproject(k.cx, k.cy, 2.5, k, cam.Pose.identity())
        assert np.allclose(p, [0, 0, 2.5])

    def test_roundtrip_random(self):
        rng = np.random.default_rng(1)
        k = default_k()
        for _ in range(20):
            pose = random_pose(rng)
            u = rng.uniform(0, k.width, size=50)
            v = rng.uniform(0, k.height, size=50)
            d = rng.uniform(0.3, 6.0, size=50)
            p = cam.backproject(u, v, d, k, pose)
            u2, v2, z2, ok = cam.project(p, k, pose)
            assert ok.all()
            assert max(np.abs(u2 - u).max(), np.abs(v2 - v).max(), np.abs(z2 - d).max()) < 1e-7

    def test_pure_translation_matches_matrix_oracle(self):
        t = np.array([0.3, -0.2, 0.5])
        pose = cam.Pose(np.eye(3), t)
        k = default_k()
        p = cam.backproject(k.cx, k.cy, 1.7, k, pose)
        # inverse transform of the camera-frame point (0,0,d)
        want = np.linalg.inv(pose.matrix()) @ np.array([0, 0, 1.7, 1.0])
        assert np.allclose(p, want[:3], atol=1e-12)

    def test_nonpositive_depth_raises(self):
        k = default_k()
        with pytest.raises(InvalidArgumentError):
            cam.backproject(10, 10, 0.0, k, cam.Pose.identity())


def transfer_oracle(u, v, d, k1, t1, kj, tj):
    """Plane transfer written directly in homogeneous matrix algebra."""
    ray = np.linalg.inv(k1.matrix()) @ np.array([u, v, 1.0])
    pc1 = ray / ray[2] * d
    pw = t1.r.T @ (pc1 - t1.t)
    pcj = tj.r @ pw + tj.t
    uvw = kj.matrix() @ pcj
    return uvw[0] / uvw[2], uvw[1] / uvw[2], pcj[2]


class TestHomographyTransfer:
    def test_same_view_identity(self):
        rng = np.random.default_rng(2)
        k = default_k()
        pose = random_pose(rng)
        for d in (0.5, 1.0, 3.7):
            u, v = 31.5, 60.2
            uj, vj, ok = cam.homography_transfer(u, v, d, k, pose, k, pose)
            assert ok[0] and abs(uj[0] - u) < 1e-9 and abs(vj[0] - v) < 1e-9

    def test_center_pixel_under_z_translation(self):
        k = default_k()
        t1 = cam.Pose.identity()
        tj = cam.Pose(np.eye(3), np.array([0, 0, 0.4]))  # moves toward scene
        for d in (1.0, 2.0, 4.0):
            uj, vj, ok = cam.homography_transfer(k.cx, k.cy, d, k, t1, k, tj)
            assert ok[0] and abs(uj[0] - k.cx) < 1e-9 and abs(vj[0] - k.cy) < 1e-9

    def test_matches_point_transfer_oracle(self):
        rng = np.random.default_rng(3)
        k1 = default_k()
        kj = cam.Intrinsics(120, 110, 70, 40, 128, 96)
        for _ in range(100):
            t1 = random_pose(rng)
            tj = random_pose(rng)
            u = rng.uniform(0, k1.width)
            v = rng.uniform(0, k1.height)
            d = rng.uniform(0.4, 5.0)
            uj, vj, ok = cam.homography_transfer(u, v, d, k1, t1, kj, tj)
            uo, vo, zo = transfer_oracle(u, v, d, k1, t1, kj, tj)
            if zo > 0:
                assert abs(uj[0] - uo) < 1e-7 and abs(vj[0] - vo) < 1e-7


class TestFrustum:
    def test_axis_point_inside(self):
        k = default_k()
        f = cam.Frustum(k, cam.Pose.identity(), 0.5, 4.0)
        assert cam.in_frustum(np.array([0.0, 0.0, 2.25]), f)[0]

    def test_point_behind_false(self):
        k = default_k()
        f = cam.Frustum(k, cam.Pose.identity(), 0.5, 4.0)
        assert not cam.in_frustum(np.array([0.0, 0.0, -2.0]), f)[0]

    def test_grid_matches_bruteforce(self):
        rng = np.random.default_rng(4)
        k = default_k()
        pose = random_pose(rng)
        f = cam.Frustum(k, pose, 0.5, 4.0)
        xs = np.linspace(-3, 3, 10)
        pts = np.stack(np.meshgrid(xs, xs, xs, indexing="ij"), axis=-1).reshape(-1, 3)
        got = cam.in_frustum(pts, f)
        for i, p in enumerate(pts):
            u, v, z, ok = cam.project(p, k, pose)
            want = bool(ok[0] and 0 <= u[0] < k.width and 0 <= v[0] < k.height and f.d_min <= z[0] <= f.d_max)
            assert got[i] == want

    def test_monotone_in_dmax(self):
        rng = np.random.default_rng(5)
        k = default_k()
        pose = random_pose(rng)
        pts = rng.normal(size=(500, 3)) * 3
        small = cam.in_frustum(pts, cam.Frustum(k, pose, 0.5, 2.0))
        large = cam.in_frustum(pts, cam.Frustum(k, pose, 0.5, 5.0))
        assert not (small & ~large).any()


class TestPoseValidation:
    def test_rejects_nonorthonormal(self):
        with pytest.raises(InvalidArgumentError):
            cam.Pose(np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_reflection(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(InvalidArgumentError):
            cam.Pose(r, np.zeros(3))

    def test_intrinsics_validation(self):
        with pytest.raises(InvalidArgumentError):
            cam.Intrinsics(-1, 100, 50, 50, 100, 100)
        with pytest.raises(InvalidArgumentError):
            cam.Intrinsics(100, 100, 150, 50, 100, 100)


class TestFileIO:
    def test_pose_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        pose = random_pose(rng)
        path = tmp_path / "pose.txt"
        cam.save_pose(path, pose)
        loaded = cam.load_pose(path)
        assert np.allclose(loaded.r, pose.r, atol=1e-12)
        assert np.allclose(loaded.t, pose.t, atol=1e-12)

    def test_intrinsics_roundtrip(self, tmp_path):
        k = cam.Intrinsics(123.5, 119.25, 63.5, 47.5, 128, 96)
        path = tmp_path / "intrinsics.txt"
        cam.save_intrinsics(path, k)
        assert cam.load_intrinsics(path) == k

    def test_pose_file_is_cam_to_world(self, tmp_path):
        rng = np.random.default_rng(7)
        pose = random_pose(rng)
        path = tmp_path / "pose.txt"
        cam.save_pose(path, pose)
        mat = np.loadtxt(path)
        assert np.allclose(mat, np.linalg.inv(pose.matrix()), atol=1e-12)


class TestLookAt:
    def test_look_at_points_camera_at_target(self):
        eye = np.array([2.0, 1.0, 1.5])
        target = np.array([0.0, 0.0, 1.0])
        pose = cam.look_at(eye, target)
        pc = pose.apply(target)
        assert abs(pc[0]) < 1e-12 and abs(pc[1]) < 1e-12 and pc[2] > 0
        assert np.allclose(pose.center(), eye)
