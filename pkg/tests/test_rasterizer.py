import math

import numpy as np
import pytest
from scipy.spatial import cKDTree

from surfelslam.gaussians import Gaussian2D, GaussianMap
from surfelslam.geometry import CameraIntrinsics, Pose, backproject, quat_mul, rotation_about, so3_exp
from surfelslam.rasterizer import (BufferAdjoints, RenderSettings, compute_homography, ray_splat_intersect, render,
                                   render_backward, render_reference, splat_weight, world_to_screen)

from conftest import random_map

BUFFERS = ("color", "depth", "silhouette", "weight", "normal", "distortion")
INTR = CameraIntrinsics(100, 100, 50, 50, 101, 101)


def one_splat(position=(0, 0, 1), rotation=(1, 0, 0, 0), scale=(0.1, 0.1), opacity=0.7, color=(1, 0, 0)):
    return GaussianMap.from_gaussians([Gaussian2D.create(position, rotation, scale, opacity, color)])


def test_homography_examples():
    H = compute_homography(Gaussian2D.create([0, 0, 0], scale_uv=(1, 1)))
    assert np.allclose((H @ [1, 0, 1, 1])[:3], [1, 0, 0])
    g = Gaussian2D.create([0.3, -0.2, 2], rotation=[2, 0.3, 0.1, 0], scale_uv=(0.1, 0.2))
    R = g.rotation_matrix
    assert np.allclose((compute_homography(g) @ [1, 1, 1, 1])[:3], g.position + 0.1 * R[:, 0] + 0.2 * R[:, 1])
    g = Gaussian2D.create([0, 0, 1], rotation=rotation_about([0, 0, 1], 90), scale_uv=(1, 1))
    assert np.allclose((compute_homography(g) @ [1, 0, 1, 1])[:3], [0, 1, 1])


def test_intersection_examples():
    g = Gaussian2D.create([0, 0, 1], scale_uv=(0.1, 0.1))
    WH = world_to_screen(INTR, Pose()) @ compute_homography(g)
    assert np.allclose(ray_splat_intersect(WH, (50, 50)), (0, 0, 1))
    assert np.allclose(ray_splat_intersect(WH, (60, 50)), (1, 0, 1))
    tilted = Gaussian2D.create([0, 0, 1.5], rotation=rotation_about([0, 1, 0], 45), scale_uv=(0.1, 0.1))
    WH = world_to_screen(INTR, Pose()) @ compute_homography(tilted)
    assert np.isclose(ray_splat_intersect(WH, (50, 50))[2], 1.5)
    edge_on = Gaussian2D.create([0, 0, 1], rotation=rotation_about([0, 1, 0], 90), scale_uv=(0.1, 0.1))
    WH = world_to_screen(INTR, Pose()) @ compute_homography(edge_on)
    assert ray_splat_intersect(WH, (50, 50)) is None


def test_splat_weight_examples():
    assert splat_weight(0, 0, (5, 5), (5, 5)) == 1.0
    assert math.isclose(splat_weight(math.sqrt(2), 0, (0, 0), (30, 30)), math.exp(-1))
    assert splat_weight(50, 0, (7, 7), (7, 7)) == 1.0


def test_single_splat_blend():
    out = render(one_splat(), INTR, Pose())
    assert np.allclose(out.color[50, 50], [0.7, 0, 0])
    assert np.isclose(out.depth[50, 50], 1.0, rtol=1e-7)
    assert np.isclose(out.silhouette[50, 50], 0.7)
    assert out.distortion[50, 50] == 0.0


def test_two_coincident_splats():
    g = GaussianMap.from_gaussians([
        Gaussian2D.create([0, 0, 1], opacity=0.5, color=(1, 0, 0), scale_uv=(0.1, 0.1)),
        Gaussian2D.create([0, 0, 1], opacity=0.5, color=(0, 1, 0), scale_uv=(0.1, 0.1)),
    ])
    out = render(g, INTR, Pose())
    assert np.allclose(out.color[50, 50], [0.5, 0.25, 0])
    rows = out.intersections(50, 50)
    assert np.isclose(rows[0]["weight"], 0.5) and np.isclose(rows[1]["weight"], 0.25)


def test_distortion_pair():
    # opacities chosen so that the blending weights are 0.4 and 0.4
    g = GaussianMap.from_gaussians([
        Gaussian2D.create([0, 0, 1.0], opacity=0.4, scale_uv=(0.1, 0.1)),
        Gaussian2D.create([0, 0, 1.1], opacity=0.4 / 0.6, scale_uv=(0.1, 0.1)),
    ])
    out = render(g, INTR, Pose())
    w = [r["weight"] for r in out.intersections(50, 50)]
    assert np.allclose(w, [0.4, 0.4])
    assert np.isclose(out.distortion[50, 50], 0.4 * 0.4 * 0.1)


def test_distortion_matches_pairwise_sum(rng):
    intr = CameraIntrinsics(30, 30, 15.5, 15.5, 32, 32)
    g = random_map(rng, 30)
    out = render(g, intr, Pose())
    for x, y in [(10, 12), (16, 16), (20, 5)]:
        rows = out.intersections(x, y)
        brute = sum(a["weight"] * b["weight"] * abs(a["depth"] - b["depth"])
                    for i, a in enumerate(rows) for b in rows[i + 1:])
        assert np.isclose(out.distortion[y, x], brute, rtol=1e-12, atol=1e-15)


def test_blending_invariants(rng):
    intr = CameraIntrinsics(30, 30, 15.5, 15.5, 32, 32)
    out = render(random_map(rng, 40), intr, Pose())
    assert (out.silhouette >= 0).all() and (out.silhouette <= 1).all()
    assert (out.weight <= 1 + 1e-12).all()
    assert (out.distortion >= 0).all()
    assert (out.depth[out.silhouette > 0] >= 0).all()
    rows = out.intersections(16, 16)
    T = [1.0]
    for r in rows:
        T.append(T[-1] * (1 - r["weight"] / T[-1]))
    assert all(a >= b for a, b in zip(T, T[1:]))


def test_empty_scene():
    with pytest.raises(ValueError, match="empty scene"):
        render(GaussianMap(), INTR, Pose())


def test_tiled_matches_reference(rng):
    intr = CameraIntrinsics(30, 30, 15.5, 15.5, 32, 32)
    for _ in range(10):
        n = int(rng.integers(1, 50))
        pos = np.c_[rng.uniform(-0.8, 0.8, (n, 2)), rng.uniform(0.05, 2.0, n)]
        g = GaussianMap(pos, rng.normal(size=(n, 4)), np.log(rng.uniform(0.005, 0.3, (n, 2))),
                        rng.normal(size=n) * 2, rng.uniform(-0.2, 1.2, (n, 3)))
        g.normalize_rotations()
        a, b = render(g, intr, Pose()), render_reference(g, intr, Pose())
        for k in BUFFERS:
            assert np.array_equal(getattr(a, k), getattr(b, k)), k


def test_fronto_parallel_plane_depth():
    intr = CameraIntrinsics(40, 40, 15.5, 15.5, 32, 32)
    ys, xs = np.mgrid[-40:41, -40:41] * 0.0125
    n = xs.size
    g = GaussianMap(np.c_[xs.ravel(), ys.ravel(), np.ones(n)], np.tile([1.0, 0, 0, 0], (n, 1)),
                    np.log(np.full((n, 2), 0.015)), np.full(n, 3.0), np.full((n, 3), 0.5))
    out = render(g, intr, Pose())
    m = out.silhouette > 0.9
    assert m.mean() > 0.9
    assert np.abs(out.depth[m] - 1.0).max() < 1e-3


def test_two_view_consistency():
    intr = CameraIntrinsics(160, 160, 31.5, 31.5, 64, 64)
    ys, xs = np.mgrid[-24:25, -24:25] * 0.01
    n = xs.size
    g = GaussianMap(np.c_[xs.ravel(), ys.ravel(), np.ones(n)], np.tile([1.0, 0, 0, 0], (n, 1)),
                    np.log(np.full((n, 2), 0.01)), np.full(n, 3.0), np.full((n, 3), 0.5))
    poses = [Pose(), Pose(rotation_about([0, 1, 0], 2.0), [0.02, 0.0, 0.02])]
    clouds = []
    for p in poses:
        out = render(g, intr, p)
        pts = backproject(np.where(out.silhouette > 0.9, out.depth, 0), intr, p)[out.silhouette > 0.9]
        clouds.append(pts[(np.abs(pts[:, 0]) < 0.08) & (np.abs(pts[:, 1]) < 0.08)])
    # pixel spacing is about 6 mm, so nearest neighbours of exact samples sit within ~4.5 mm
    d, _ = cKDTree(clouds[1]).query(clouds[0])
    assert len(d) > 500
    assert d.max() < 1e-2


def test_zero_adjoint_gives_zero_gradients(rng):
    intr = CameraIntrinsics(8, 8, 3.5, 3.5, 8, 8)
    g = random_map(rng, 3)
    out = render(g, intr, Pose())
    gr = render_backward(g, intr, Pose(), out, BufferAdjoints())
    for v in gr.gaussian_groups().values():
        assert not v.any()
    assert not gr.pose_rotation.any() and not gr.pose_translation.any()


def test_color_gradient_is_weight():
    g = one_splat()
    out = render(g, INTR, Pose())
    adj = np.zeros(out.color.shape)
    adj[50, 50, 0] = 1.0
    gr = render_backward(g, INTR, Pose(), out, BufferAdjoints(color=adj))
    assert np.isclose(gr.color[0, 0], out.intersections(50, 50)[0]["weight"])


def test_stale_blend_state_rejected(rng):
    intr = CameraIntrinsics(8, 8, 3.5, 3.5, 8, 8)
    g = random_map(rng, 3)
    out = render(g, intr, Pose())
    g.positions[0, 0] += 0.01
    with pytest.raises(ValueError):
        render_backward(g, intr, Pose(), out, BufferAdjoints(depth=np.ones((8, 8))))


def test_gradients_match_finite_differences(rng):
    intr = CameraIntrinsics(8, 8, 3.5, 3.5, 8, 8)
    S = RenderSettings(kernel_cutoff=0)
    g = random_map(rng, 3)
    pose = Pose([1, 0.02, -0.03, 0.01], [0.02, -0.01, 0.05])
    adj = BufferAdjoints(rng.normal(size=(8, 8, 3)), rng.normal(size=(8, 8)), rng.normal(size=(8, 8)),
                         rng.normal(size=(8, 8, 3)), rng.normal(size=(8, 8)))

    def f(gm, p):
        o = render(gm, intr, p, S)
        return sum(np.sum(getattr(adj, k) * getattr(o, k)) for k in ("color", "depth", "silhouette", "normal",
                                                                       "distortion"))

    gr = render_backward(g, intr, pose, render(g, intr, pose, S), adj)
    h = 1e-4

    def check(perturb, analytic):
        num = (f(*perturb(h)) - f(*perturb(-h))) / (2 * h)
        assert abs(num - analytic) <= 1e-4 * max(abs(num), abs(analytic), 1e-6)

    for i in range(len(g)):
        def rot(e, c=0):
            q = g.copy()
            d = np.zeros(3)
            d[c] = e
            q.rotations[i] = quat_mul(q.rotations[i], so3_exp(d))
            return q, pose
        for c in range(3):
            check(lambda e: (_shift(g, "positions", (i, c), e), pose), gr.position[i, c])
            check(lambda e: rot(e, c), gr.rotation[i, c])
            check(lambda e: (_shift(g, "colors", (i, c), e), pose), gr.color[i, c])
        for c in range(2):
            check(lambda e: (_shift(g, "log_scales", (i, c), e), pose), gr.log_scale[i, c])
        check(lambda e: (_shift(g, "opacity_logits", (i,), e), pose), gr.opacity_logit[i])
    for c in range(3):
        d = np.eye(3)[c]
        check(lambda e: (g, pose.retract(d * e)), gr.pose_rotation[c])
        check(lambda e: (g, Pose(pose.rotation, pose.translation + d * e)), gr.pose_translation[c])


def _shift(g, name, idx, e):
    q = g.copy()
    getattr(q, name)[idx] += e
    return q
