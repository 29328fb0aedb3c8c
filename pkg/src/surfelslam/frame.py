from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import CameraIntrinsics, Pose, backproject, normals_from_points


@dataclass(eq=False)
class Frame:
    """An RGB-D observation.

    ``points`` and ``normals`` are expressed in the camera frame so they stay
    valid while the frame's pose estimate changes; use :meth:`world_points`
    for world coordinates.
    """

    index: int
    color: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    gt_pose: Pose | None = None
    timestamp: float | None = None
    path: str | None = field(default=None, repr=False)

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.shape != self.intrinsics.shape or self.color.shape[:2] != self.depth.shape:
            raise ValueError(f"frame {self.index}: image shape does not match intrinsics")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @cached_property
    def valid_depth(self) -> np.ndarray:
        return self.depth > 0

    @cached_property
    def points(self) -> np.ndarray:
        return backproject(self.depth, self.intrinsics)

    @cached_property
    def normals(self) -> np.ndarray:
        return normals_from_points(self.points)

    @cached_property
    def normal_valid(self) -> np.ndarray:
        return np.isfinite(self.normals).all(axis=-1)

    def world_points(self, pose: Pose) -> np.ndarray:
        return pose.apply(self.points)

    def world_normals(self, pose: Pose) -> np.ndarray:
        return self.normals @ pose.rotation_matrix.T
