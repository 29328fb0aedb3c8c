"""RGB-D sequence IO.

Layout of a dataset directory::

    intrinsics.json      fx, fy, cx, cy, width, height, depth_scale
    color/000000.png     8-bit RGB
    depth/000000.png     16-bit, metres = value / depth_scale, 0 = invalid
    groundtruth.txt      optional: "index tx ty tz qx qy qz qw" per line (camera to world)
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .frame import Frame
from .geometry import CameraIntrinsics, Pose


def read_groundtruth(path) -> dict[int, Pose]:
    poses = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}: malformed line {line!r}")
        idx = int(parts[0])
        tx, ty, tz, qx, qy, qz, qw = map(float, parts[1:])
        poses[idx] = Pose([qw, qx, qy, qz], [tx, ty, tz])
    return poses


def format_pose_line(index: int, pose: Pose) -> str:
    t = pose.translation
    w, x, y, z = pose.rotation
    return f"{index} " + " ".join(repr(float(v)) for v in (t[0], t[1], t[2], x, y, z, w))


def write_trajectory(path, poses, indices=None) -> None:
    indices = range(len(poses)) if indices is None else indices
    Path(path).write_text("".join(format_pose_line(i, p) + "\n" for i, p in zip(indices, poses)))


def read_intrinsics(path) -> CameraIntrinsics:
    d = json.loads(Path(path).read_text())
    return CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]),
                            int(d["height"]), float(d.get("depth_scale", 1000.0)))


def subsample(frame: Frame, divisor: int) -> Frame:
    """Keep every ``divisor``-th pixel; intrinsics scale to match."""
    if divisor == 1:
        return frame
    return Frame(frame.index, frame.color[::divisor, ::divisor], frame.depth[::divisor, ::divisor],
                 frame.intrinsics.scaled(divisor), frame.gt_pose, frame.timestamp, frame.path)


def _read_png(path: Path, rgb: bool) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB") if rgb else im)
    except (OSError, ValueError) as exc:
        raise OSError(f"unreadable frame: {path}") from exc


class RGBDDataset:
    """Lazily loaded dataset directory."""

    def __init__(self, root, divisor: int = 1):
        self.root = Path(root)
        if not (self.root / "intrinsics.json").is_file():
            raise FileNotFoundError(f"{self.root / 'intrinsics.json'}: not found")
        self.base_intrinsics = read_intrinsics(self.root / "intrinsics.json")
        self.divisor = divisor
        self.color_paths = sorted((self.root / "color").glob("*.png"))
        self.depth_paths = sorted((self.root / "depth").glob("*.png"))
        if len(self.color_paths) != len(self.depth_paths):
            raise ValueError(f"{self.root}: {len(self.color_paths)} colour vs {len(self.depth_paths)} depth images")
        gt = self.root / "groundtruth.txt"
        self.gt_poses = read_groundtruth(gt) if gt.is_file() else {}

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.base_intrinsics.scaled(self.divisor)

    def __len__(self) -> int:
        return len(self.color_paths)

    def __getitem__(self, i: int) -> Frame:
        cp, dp = self.color_paths[i], self.depth_paths[i]
        color = _read_png(cp, True).astype(np.float64) / 255.0
        depth = _read_png(dp, False).astype(np.float64) / self.base_intrinsics.depth_scale
        idx = int(cp.stem)
        frame = Frame(idx, color, depth, self.base_intrinsics, gt_pose=self.gt_poses.get(idx), timestamp=float(idx),
                      path=str(cp))
        return subsample(frame, self.divisor)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


class FrameList:
    """In-memory stand-in for :class:`RGBDDataset`."""

    def __init__(self, frames: list[Frame], divisor: int = 1):
        self.frames = frames
        self.divisor = divisor

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.frames[0].intrinsics.scaled(self.divisor)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> Frame:
        return subsample(self.frames[i], self.divisor)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def write_dataset(root, frames: list[Frame], intrinsics: CameraIntrinsics) -> Path:
    root = Path(root)
    (root / "color").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    (root / "intrinsics.json").write_text(json.dumps(intrinsics.to_dict(), indent=2) + "\n")
    for f in frames:
        rgb = np.round(np.clip(f.color, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(root / "color" / f"{f.index:06d}.png")
        d = np.round(f.depth * intrinsics.depth_scale)
        if d.max() > 65535:
            raise ValueError("depth exceeds the 16-bit range; lower depth_scale")
        Image.fromarray(d.astype(np.uint16)).save(root / "depth" / f"{f.index:06d}.png")
    if all(f.gt_pose is not None for f in frames):
        write_trajectory(root / "groundtruth.txt", [f.gt_pose for f in frames], [f.index for f in frames])
    return root


def open_dataset(root, divisor: int = 1) -> RGBDDataset:
    return RGBDDataset(root, divisor)
