"""Planar Gaussian surfels and the growable scene map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose, frame_from_normal, quat_normalize, quat_to_rotmat

PARAM_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "colors")

DEFAULT_OPACITY_LOGIT = 0.5


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian2D:
    """One surfel in its stored (optimizer) parameterisation."""

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @classmethod
    def create(cls, position, rotation=(1.0, 0.0, 0.0, 0.0), scale_uv=(1.0, 1.0), opacity=0.5, color=(0.5, 0.5, 0.5)):
        return cls(
            np.asarray(position, dtype=np.float64),
            quat_normalize(rotation),
            np.log(np.asarray(scale_uv, dtype=np.float64)),
            float(logit(opacity)),
            np.asarray(color, dtype=np.float64),
        )

    @property
    def scale_uv(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def rotation_matrix(self) -> np.ndarray:
        """Columns are the tangents t_u, t_v and the normal t_w = t_u x t_v."""
        return quat_to_rotmat(self.rotation)

    @property
    def normal(self) -> np.ndarray:
        return self.rotation_matrix[:, 2]


class GaussianMap:
    """Structure-of-arrays container for all surfels in the scene."""

    def __init__(self, positions=None, rotations=None, log_scales=None, opacity_logits=None, colors=None, creation_frame=None):
        n = 0 if positions is None else len(positions)
        self.positions = np.zeros((0, 3)) if positions is None else np.array(positions, dtype=np.float64).reshape(n, 3)
        self.rotations = np.zeros((0, 4)) if rotations is None else np.array(rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.zeros((0, 2)) if log_scales is None else np.array(log_scales, dtype=np.float64).reshape(n, 2)
        self.opacity_logits = np.zeros(0) if opacity_logits is None else np.array(opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.zeros((0, 3)) if colors is None else np.array(colors, dtype=np.float64).reshape(n, 3)
        if creation_frame is None:
            creation_frame = np.zeros(n, dtype=np.int64)
        self.creation_frame = np.array(creation_frame, dtype=np.int64).reshape(n)

    @classmethod
    def from_gaussians(cls, gaussians, creation_frame=None) -> GaussianMap:
        gs = list(gaussians)
        return cls(
            [g.position for g in gs],
            [g.rotation for g in gs],
            [g.log_scale for g in gs],
            [g.opacity_logit for g in gs],
            [g.color for g in gs],
            creation_frame,
        )

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i) -> Gaussian2D:
        return Gaussian2D(
            self.positions[i].copy(),
            self.rotations[i].copy(),
            self.log_scales[i].copy(),
            float(self.opacity_logits[i]),
            self.colors[i].copy(),
        )

    def copy(self) -> GaussianMap:
        return GaussianMap(
            self.positions, self.rotations, self.log_scales, self.opacity_logits, self.colors, self.creation_frame
        )

    def extend(self, other: GaussianMap) -> None:
        for name in PARAM_GROUPS + ("creation_frame",):
            setattr(self, name, np.concatenate([getattr(self, name), getattr(other, name)]))

    def keep(self, mask) -> None:
        for name in PARAM_GROUPS + ("creation_frame",):
            setattr(self, name, getattr(self, name)[mask])

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def equals(self, other: GaussianMap) -> bool:
        return len(self) == len(other) and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_GROUPS
        )

    def checksum(self) -> float:
        return float(sum(np.sum(getattr(self, n)) for n in PARAM_GROUPS))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def rotation_matrices(self) -> np.ndarray:
        return quat_to_rotmat(self.rotations)

    @property
    def normals(self) -> np.ndarray:
        return self.rotation_matrices[:, :, 2]

    def normalize_rotations(self) -> None:
        self.rotations = quat_normalize(self.rotations)


def seed_gaussians(frame, pose: Pose, mask=None, stride: int = 2, frame_index: int = 0) -> GaussianMap:
    """New surfels on the stride grid of valid (and masked) pixels of ``frame``.

    Each surfel sits on the back-projected depth, takes the pixel colour, has
    a one-pixel footprint (``depth / fx``) and faces along the measured normal,
    or back along the viewing ray where the normal is undefined.
    """
    intr: CameraIntrinsics = frame.intrinsics
    H, W = frame.depth.shape
    sel = frame.valid_depth.copy()
    if mask is not None:
        sel &= mask
    grid = np.zeros((H, W), dtype=bool)
    grid[::stride, ::stride] = True
    sel &= grid
    ys, xs = np.nonzero(sel)
    if len(ys) == 0:
        return GaussianMap()

    R, t = pose.rotation_matrix, pose.translation
    pts_cam = frame.points[ys, xs]
    n_cam = frame.normals[ys, xs]
    missing = ~np.isfinite(n_cam).all(axis=-1)
    n_cam[missing] = -pts_cam[missing] / np.linalg.norm(pts_cam[missing], axis=-1, keepdims=True)
    depth = frame.depth[ys, xs]
    s = depth / intr.fx

    return GaussianMap(
        positions=pts_cam @ R.T + t,
        rotations=frame_from_normal(n_cam @ R.T),
        log_scales=np.log(np.stack([s, s], axis=-1)),
        opacity_logits=np.full(len(ys), DEFAULT_OPACITY_LOGIT),
        colors=frame.color[ys, xs].astype(np.float64),
        creation_frame=np.full(len(ys), frame_index, dtype=np.int64),
    )


def init_map_from_frame(frame, pose: Pose, stride: int = 2) -> GaussianMap:
    gmap = seed_gaussians(frame, pose, stride=stride, frame_index=frame.index)
    if len(gmap) == 0:
        raise ValueError("no valid depth to initialize")
    return gmap
