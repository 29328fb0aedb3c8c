import math

import numpy as np
import pytest

from surfelslam.geometry import Pose, rotation_about
from surfelslam.metrics import (metric_ate, metric_depth_rmse, metric_normal_error, metric_psnr, metric_ssim,
                                rigid_align, serializable, trajectory_extent)


def _traj(rng, n=20):
    return [Pose(rotation_about(rng.normal(size=3), rng.uniform(0, 30)), rng.uniform(-1, 1, 3)) for _ in range(n)]


def test_ate_zero_for_identical_and_rigidly_moved(rng):
    gt = _traj(rng)
    assert metric_ate(gt, gt) == pytest.approx(0, abs=1e-9)
    T = Pose(rotation_about([1, 2, 3], 40), [3, -1, 2])
    moved = [T.compose(p) for p in gt]
    assert metric_ate(moved, gt) == pytest.approx(0, abs=1e-9)
    assert metric_ate(moved, gt, align=False) > 100


def test_ate_constant_offset_without_alignment(rng):
    gt = _traj(rng)
    est = [Pose(p.rotation, p.translation + [0.003, 0.004, 0.0]) for p in gt]
    assert metric_ate(est, gt, align=False) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        metric_ate(est[:3], gt)
    with pytest.raises(ValueError):
        metric_ate([], [])


def test_rigid_align_recovers_transform(rng):
    src = rng.normal(size=(30, 3))
    R = Pose(rotation_about([0, 0, 1], 70)).rotation_matrix
    dst = src @ R.T + [1, 2, 3]
    R_est, t_est = rigid_align(src, dst)
    assert np.allclose(R_est, R) and np.allclose(t_est, [1, 2, 3])
    assert np.linalg.det(R_est) == pytest.approx(1.0)


def test_trajectory_extent():
    poses = [Pose(translation=t) for t in ([0, 0, 0], [0.3, 0, 0], [0, 0.4, 0])]
    assert trajectory_extent(poses) == pytest.approx(0.5)
    assert trajectory_extent(poses[:1]) == 0.0


def test_depth_rmse_in_millimetres():
    gt = np.ones((4, 4))
    r = gt + 0.002
    m = np.ones((4, 4), bool)
    assert metric_depth_rmse(r, gt, m) == pytest.approx(2.0)
    r2 = gt.copy()
    r2[0, 0] = 5.0
    m2 = m.copy()
    m2[0, 0] = False
    assert metric_depth_rmse([r, r2], [gt, gt], [m, m2]) == pytest.approx(math.sqrt(16 * 4 / 31))
    with pytest.raises(ValueError, match="empty mask"):
        metric_depth_rmse(r, gt, ~m)


def test_psnr_and_ssim():
    a = np.full((16, 16, 3), 0.5)
    assert metric_psnr(a, a) == math.inf
    assert metric_psnr(a + 0.1, a) == pytest.approx(20.0)
    assert metric_ssim(a, a) == pytest.approx(1.0)
    assert metric_ssim(a + 2.0, np.ones_like(a)) == pytest.approx(1.0)
    assert serializable(math.inf) == 99.0
    assert serializable(25.0) == 25.0


def test_normal_error():
    n = np.zeros((2, 2, 3))
    n[..., 2] = 2.0
    gt = np.zeros((2, 2, 3))
    gt[..., 2] = 1.0
    m = np.ones((2, 2), bool)
    assert metric_normal_error(n, gt, m) == pytest.approx(0.0, abs=1e-6)
    gt[0, 0] = [1.0, 0, 0]
    assert metric_normal_error(n, gt, m) == pytest.approx(22.5)
    gt[1, 1] = np.nan
    assert metric_normal_error(n, gt, m) == pytest.approx(30.0)
    with pytest.raises(ValueError):
        metric_normal_error(n, gt, ~m)
