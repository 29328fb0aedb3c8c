import numpy as np
import pytest

from surfelslam.geometry import CameraIntrinsics, Pose, rotation_about
from surfelslam.objectives import tracking_loss
from surfelslam.rasterizer import render, render_backward
from surfelslam.tracking import TrackerState, TrackingConfig, body_gradients, body_step, track_frame

from conftest import plane_frame, random_map, wavy_target


@pytest.fixture(scope="module")
def scene():
    return wavy_target(stride=2)


def test_body_step_pivot_is_fixed_point():
    pose = Pose(rotation_about([0, 1, 0], 10), [0.1, 0.2, 0.3])
    pivot = np.array([0, 0, 1.5])
    new = body_step(pose, np.array([0.01, -0.02, 0.03]), np.zeros(3), pivot)
    assert np.allclose(new.apply(pivot[None])[0], pose.apply(pivot[None])[0])
    assert body_step(pose, np.zeros(3), np.zeros(3), pivot).allclose(pose)


def test_body_gradients_match_finite_differences(rng):
    g = random_map(rng, 40)
    intr = CameraIntrinsics(60, 60, 15.5, 15.5, 32, 32)
    frame = plane_frame(intr, depth=1.3)
    pose = Pose(rotation_about([1, 0, 0], 1.0), [0.01, 0, 0])
    pivot = np.array([0, 0, 1.3])

    def loss(dtheta, dt):
        p = body_step(pose, dtheta, dt, pivot)
        return tracking_loss(render(g, intr, p), frame, silhouette_threshold=0.0).breakdown.total

    out = render(g, intr, pose)
    res = tracking_loss(out, frame, silhouette_threshold=0.0)
    grads = render_backward(g, intr, pose, out, res.adjoints, pose_grad=True)
    g_rot, g_trans = body_gradients(pose, grads.pose_rotation, grads.pose_translation, pivot)
    h = 1e-7
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        num_r = (loss(e, np.zeros(3)) - loss(-e, np.zeros(3))) / (2 * h)
        num_t = (loss(np.zeros(3), e) - loss(np.zeros(3), -e)) / (2 * h)
        assert num_r == pytest.approx(g_rot[k], rel=1e-3, abs=1e-6)
        assert num_t == pytest.approx(g_trans[k], rel=1e-3, abs=1e-6)


def test_stationary_frame_stays_put(scene):
    g, frame = scene
    st = TrackerState(TrackingConfig(), 1.0, [Pose.identity()])
    r = track_frame(g, frame, st)
    assert not r.diverged
    assert r.pose.distance_to(Pose.identity()) < 1e-4
    assert np.degrees(r.pose.angle_to(Pose.identity())) < 1e-3


def test_recovers_small_perturbation_and_leaves_map_alone(scene):
    g, frame = scene
    before = g.copy()
    init = Pose.identity().retract(np.radians(0.5) * np.array([0.6, 0.0, 0.8]), 0.005 * np.array([0, 1.0, 0]))
    st = TrackerState(TrackingConfig(), 1.0, [init])
    r = track_frame(g, frame, st)
    assert np.degrees(r.pose.angle_to(Pose.identity())) < 0.05
    assert r.pose.distance_to(Pose.identity()) < 0.0005
    assert all(b >= a for a, b in zip(r.best_history[1:], r.best_history))
    assert r.loss.total <= r.init_loss
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors"):
        assert np.array_equal(getattr(g, name), getattr(before, name))
    assert st.prev_poses[-1] is r.pose


def test_empty_overlap_reports_divergence(scene):
    g, frame = scene
    away = Pose(rotation_about([0, 1, 0], 180.0), [0, 0, 0])
    st = TrackerState(TrackingConfig(), 1.0, [away])
    r = track_frame(g, frame, st)
    assert r.diverged and r.error
    assert r.pose.allclose(away)


def test_empty_map_raises(scene):
    from surfelslam.gaussians import GaussianMap

    with pytest.raises(ValueError, match="empty scene"):
        track_frame(GaussianMap(), scene[1], TrackerState(prev_poses=[Pose.identity()]))


def test_needs_prior_pose(scene):
    with pytest.raises(ValueError):
        TrackerState().initial_pose()
