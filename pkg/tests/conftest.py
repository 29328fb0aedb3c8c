import numpy as np
import pytest

from surfelslam.frame import Frame
from surfelslam.gaussians import GaussianMap
from surfelslam.geometry import CameraIntrinsics, Pose, quat_normalize


# criterion number -> one-line verdict, printed after the run
ACCEPTANCE: dict[int, str] = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_map(rng, n, xy=0.3, z=(1.0, 1.6), scale=(0.2, 0.4), color=(0.1, 0.9)):
    pos = np.c_[rng.uniform(-xy, xy, (n, 2)), rng.uniform(*z, n)]
    rot = quat_normalize(np.c_[np.full(n, 2.0), rng.normal(size=(n, 3)) * 0.4])
    return GaussianMap(pos, rot, np.log(rng.uniform(*scale, (n, 2))), rng.uniform(-0.8, 1.2, n),
                       rng.uniform(*color, (n, 3)))


def plane_frame(intr: CameraIntrinsics, depth=1.0, color=None, index=0, pose=None) -> Frame:
    H, W = intr.shape
    if color is None:
        ys, xs = np.mgrid[0:H, 0:W]
        color = np.stack([0.5 + 0.3 * np.sin(xs / 3.0), 0.5 + 0.3 * np.cos(ys / 4.0), np.full((H, W), 0.4)], -1)
    return Frame(index, color, np.full((H, W), float(depth)), intr, gt_pose=pose or Pose())


def wavy_target(stride=1):
    """Surfel map of the analytic wavy plane and a frame rendered from it at the identity pose.

    The frame comes from the map itself, so the identity is an exact minimum of the tracking loss.
    """
    from surfelslam.gaussians import init_map_from_frame, logit
    from surfelslam.rasterizer import render
    from surfelslam.synth import DEFAULT_INTRINSICS, WavyPlane, make_frames

    intr = DEFAULT_INTRINSICS
    src = make_frames(WavyPlane(), 1, intr, quantized=False)[0]
    g = init_map_from_frame(src, Pose.identity(), stride=stride)
    g.log_scales += np.log(1.5 * stride)
    g.opacity_logits[:] = logit(0.9)
    out = render(g, intr, Pose.identity())
    return g, Frame(0, out.color, np.where(out.silhouette > 0.5, out.depth, 0.0), intr, gt_pose=Pose.identity())
