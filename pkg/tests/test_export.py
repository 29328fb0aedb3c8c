import numpy as np
import pytest
from PIL import Image

from surfelslam.export import PLY_PROPERTIES, colorize_depth, colorize_normals, export_map_ply, load_map_ply, read_ply, render_views
from surfelslam.gaussians import GaussianMap
from surfelslam.geometry import CameraIntrinsics, Pose

from conftest import random_map


def test_ply_round_trip(tmp_path, rng):
    g = random_map(rng, 25)
    path = export_map_ply(g, tmp_path / "map.ply")
    v = read_ply(path)
    assert tuple(v) == PLY_PROPERTIES and len(v["x"]) == 25
    back = load_map_ply(path)
    assert np.allclose(back.positions, g.positions, rtol=1e-8)
    assert np.allclose(back.scales, g.scales, rtol=1e-8)
    assert np.allclose(back.opacities, g.opacities, rtol=1e-7)
    assert np.allclose(np.abs(np.sum(back.rotations * g.rotations, 1)), 1.0)


def test_ply_errors(tmp_path):
    with pytest.raises(ValueError, match="empty map"):
        export_map_ply(GaussianMap(), tmp_path / "m.ply")
    (tmp_path / "bad.ply").write_text("not a ply\n")
    with pytest.raises(ValueError):
        read_ply(tmp_path / "bad.ply")
    with pytest.raises(OSError):
        export_map_ply(random_map(np.random.default_rng(0), 2), tmp_path / "missing" / "m.ply")


def test_colorize():
    d = np.array([[1.0, 2.0], [3.0, 0.0]])
    img = colorize_depth(d, (1.0, 3.0), mask=d > 0)
    assert img.dtype == np.uint8 and img.shape == (2, 2, 3)
    assert (img[1, 1] == 0).all()
    assert not (img[0, 0] == img[1, 0]).all()
    n = np.zeros((1, 1, 3))
    n[..., 2] = -5.0
    assert colorize_normals(n).tolist() == [[[128, 128, 0]]]


def test_render_views_writes_pngs(tmp_path, rng):
    intr = CameraIntrinsics(60, 60, 15.5, 15.5, 32, 32)
    files = render_views(random_map(rng, 30), [Pose(), Pose(translation=[0.05, 0, 0])], intr, tmp_path / "v",
                         indices=[3, 7])
    names = sorted(p.name for p in files)
    assert names == sorted(f"{k}_{i:06d}.png" for k in ("color", "depth", "normal") for i in (3, 7))
    with Image.open(files[0]) as im:
        assert im.size == (32, 32) and im.mode == "RGB"
