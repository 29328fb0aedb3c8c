import numpy as np
import pytest

from surfelslam.geometry import (CameraIntrinsics, Pose, backproject, compose, constant_velocity_init,
                                 gt_normal_from_depth, normals_from_points, quat_mul, quat_to_rotmat,
                                 rotation_about, rotmat_to_quat, so3_exp, so3_log)


def random_pose(rng):
    return Pose(rng.normal(size=4), rng.normal(size=3))


def test_quaternion_matrix_round_trip(rng):
    for _ in range(20):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        q2 = rotmat_to_quat(quat_to_rotmat(q))
        assert min(np.abs(q - q2).max(), np.abs(q + q2).max()) < 1e-12


def test_so3_exp_log_round_trip(rng):
    for _ in range(20):
        v = rng.normal(size=3) * 0.7
        assert np.allclose(so3_log(so3_exp(v)), v, atol=1e-12)


def test_compose_identity_and_inverse(rng):
    P = random_pose(rng)
    Q = compose(Pose(), P)
    assert np.allclose(Q.matrix(), P.matrix(), atol=1e-15)
    I = compose(P, P.inverse())
    assert np.allclose(I.matrix(), np.eye(4), atol=1e-12)


def test_compose_quarter_turns():
    Rz = Pose(rotation_about([0, 0, 1], 90.0), np.zeros(3))
    assert np.allclose(compose(Rz, Rz).apply(np.array([1.0, 0, 0])), [-1, 0, 0], atol=1e-12)


def test_compose_applies_right_then_left(rng):
    a, b = random_pose(rng), random_pose(rng)
    x = rng.normal(size=3)
    assert np.allclose(compose(a, b).apply(x), a.apply(b.apply(x)), atol=1e-12)


def test_compose_associative(rng):
    a, b, c = (random_pose(rng) for _ in range(3))
    assert np.allclose(compose(compose(a, b), c).matrix(), compose(a, compose(b, c)).matrix(), atol=1e-12)


def test_constant_velocity_cases():
    p = Pose(rotation_about([0, 1, 0], 5.0), [0.1, 0.2, 0.3])
    assert np.allclose(constant_velocity_init(p, p).matrix(), p.matrix(), atol=1e-14)
    assert constant_velocity_init(p, None) is p
    a, b = Pose(translation=[0, 0, 1]), Pose(translation=[0, 0, 2])
    assert np.allclose(constant_velocity_init(b, a).translation, [0, 0, 3])
    r10 = Pose(rotation_about([0, 0, 1], 10.0), [1, 2, 3])
    r20 = Pose(rotation_about([0, 0, 1], 20.0), [1, 2, 3])
    out = constant_velocity_init(r20, r10)
    assert np.degrees(out.angle_to(Pose(rotation_about([0, 0, 1], 30.0)))) < 1e-9
    assert np.allclose(out.translation, [1, 2, 3])


def test_retract_matches_right_perturbation(rng):
    P = random_pose(rng)
    d = rng.normal(size=3) * 0.01
    Q = P.retract(d, np.zeros(3))
    assert np.allclose(Q.rotation_matrix, P.rotation_matrix @ quat_to_rotmat(so3_exp(d)), atol=1e-12)
    assert np.isclose(Q.angle_to(P), np.linalg.norm(d), rtol=1e-9)


def test_backproject_examples():
    intr = CameraIntrinsics(100, 100, 50, 40, 101, 81)
    d = np.zeros((81, 101))
    d[40, 50] = 1.0
    pts = backproject(d, intr)
    assert np.allclose(pts[40, 50], [0, 0, 1])
    wide = CameraIntrinsics(100, 100, 50, 40, 160, 81)
    dw = np.zeros((81, 160))
    dw[40, 150] = 2.0
    assert np.allclose(backproject(dw, wide)[40, 150], [2, 0, 2])


def test_backproject_project_round_trip(rng):
    intr = CameraIntrinsics(120, 110, 40.3, 30.7, 80, 60)
    depth = rng.uniform(0.5, 3, (60, 80))
    pose = Pose(rng.normal(size=4), rng.normal(size=3))
    pts = backproject(depth, intr, pose)
    Rt, tw = pose.world_to_camera()
    cam = pts.reshape(-1, 3) @ Rt.T + tw
    uv = intr.project(cam)
    ys, xs = np.mgrid[0:60, 0:80]
    assert np.abs(uv - np.c_[xs.ravel(), ys.ravel()]).max() < 1e-6


def test_subsampled_intrinsics_halve_projections(rng):
    intr = CameraIntrinsics(100, 100, 79.5, 59.5, 160, 120)
    half = intr.scaled(2)
    p = np.c_[rng.uniform(-1, 1, (10, 2)), rng.uniform(1, 3, 10)]
    assert np.allclose(half.project(p), 0.5 * intr.project(p), atol=1e-12)


def test_normals_flat_plane():
    intr = CameraIntrinsics(50, 50, 15.5, 11.5, 32, 24)
    n = normals_from_points(backproject(np.full((24, 32), 2.0), intr))
    assert np.allclose(n, [0, 0, -1], atol=1e-12)


def test_normals_tilted_plane():
    intr = CameraIntrinsics(50, 50, 15.5, 11.5, 32, 24)
    ys, xs = np.mgrid[0:24, 0:32].astype(float)
    X = (xs - intr.cx) / intr.fx
    # z = 1 + 0.5 X with X = x z  =>  z = 1 / (1 - 0.5 x)
    depth = 1.0 / (1.0 - 0.5 * X)
    n = gt_normal_from_depth(backproject(depth, intr))
    expected = np.array([-0.5, 0.0, 1.0]) / np.sqrt(1.25)
    # camera-facing sign convention
    assert np.allclose(np.abs(n[..., 0]), abs(expected[0]), atol=1e-9)
    assert np.allclose(n, -expected, atol=1e-9) or np.allclose(n, expected, atol=1e-9)
    assert np.allclose(np.linalg.norm(n, axis=-1), 1.0)


def test_normals_hole_marks_neighbourhood():
    intr = CameraIntrinsics(50, 50, 7.5, 7.5, 16, 16)
    depth = np.full((16, 16), 1.0)
    depth[8, 8] = 0.0
    n = gt_normal_from_depth(backproject(depth, intr))
    undefined = ~np.isfinite(n).all(-1)
    assert undefined[7:10, 7:10].all()
    assert undefined.sum() == 9


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(-1, 100, 10, 10, 20, 20)
    with pytest.raises(ValueError):
        CameraIntrinsics(100, 100, 25, 10, 20, 20)
