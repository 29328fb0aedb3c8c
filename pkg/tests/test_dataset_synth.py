import numpy as np
import pytest

from surfelslam.dataset import FrameList, open_dataset, read_groundtruth, subsample, write_dataset, write_trajectory
from surfelslam.geometry import Pose, rotation_about
from surfelslam.synth import DEFAULT_INTRINSICS, SCENES, SphereBore, make_frames, make_scene, synth_generate


def test_trajectory_round_trip(tmp_path):
    poses = [Pose(rotation_about([1, 2, 3], 17.0), [0.1, -0.2, 0.3]), Pose()]
    write_trajectory(tmp_path / "t.txt", poses, [4, 9])
    back = read_groundtruth(tmp_path / "t.txt")
    assert sorted(back) == [4, 9]
    assert back[4].as_tuple() == poses[0].as_tuple()
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(ValueError):
        read_groundtruth(tmp_path / "bad.txt")


def test_sphere_depth_matches_analytic_range():
    f = make_frames(SphereBore(), 1, quantized=False)[0]
    pts = f.world_points(f.gt_pose)[f.valid_depth]
    assert f.valid_depth.all()
    assert np.allclose(np.linalg.norm(pts, axis=1), 0.05, atol=1e-12)


def test_synth_generate_round_trip(tmp_path):
    root = synth_generate("sphere", tmp_path / "ds", n_frames=3, rng_seed=1)
    ds = open_dataset(root)
    assert len(ds) == 3 and ds.intrinsics == DEFAULT_INTRINSICS
    ref = make_frames(SphereBore(), 3, seed=1)
    f = ds[2]
    assert np.array_equal(f.depth, ref[2].depth)
    assert np.abs(f.color - ref[2].color).max() < 1e-12
    assert f.gt_pose.as_tuple() == pytest.approx(ref[2].gt_pose.as_tuple(), abs=1e-15)
    half = open_dataset(root, divisor=2)[0]
    assert half.shape == (60, 80) and half.intrinsics == DEFAULT_INTRINSICS.scaled(2)


def test_synth_is_seeded():
    a = make_frames(SphereBore(), 1, seed=3)[0].color
    assert np.array_equal(a, make_frames(SphereBore(), 1, seed=3)[0].color)
    assert not np.array_equal(a, make_frames(SphereBore(), 1, seed=4)[0].color)


def test_scenes_and_frame_list():
    assert set(SCENES) == {"sphere", "wavy", "step"}
    with pytest.raises(ValueError):
        make_scene("cube")
    frames = make_frames(make_scene("step"), 2, DEFAULT_INTRINSICS.scaled(4), quantized=False)
    fl = FrameList(frames, divisor=2)
    assert fl[1].shape == (15, 20)
    assert subsample(frames[0], 1) is frames[0]


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        open_dataset(tmp_path)


def test_write_rejects_depth_overflow(tmp_path):
    f = make_frames(SphereBore(), 1, quantized=False)[0]
    f.depth[:] = 10.0
    with pytest.raises(ValueError):
        write_dataset(tmp_path, [f], DEFAULT_INTRINSICS)
