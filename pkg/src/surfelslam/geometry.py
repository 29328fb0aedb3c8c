"""Rigid-body and pinhole-camera geometry.

Quaternions are stored scalar-first, ``(w, x, y, z)``, and every function in
this module accepts arbitrary leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_rotmat(q):
    """Rotation matrix of a (not necessarily unit) quaternion."""
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    R = np.empty(np.shape(w) + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Shepperd's method; returns quaternions with non-negative w."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    m = R.reshape(-1, 3, 3)
    m00, m11, m22 = m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]
    tr = m00 + m11 + m22
    # four candidate solutions; pick the numerically largest pivot per matrix
    cands = np.stack(
        [
            np.stack([1 + tr, m[:, 2, 1] - m[:, 1, 2], m[:, 0, 2] - m[:, 2, 0], m[:, 1, 0] - m[:, 0, 1]], -1),
            np.stack([m[:, 2, 1] - m[:, 1, 2], 1 + m00 - m11 - m22, m[:, 0, 1] + m[:, 1, 0], m[:, 0, 2] + m[:, 2, 0]], -1),
            np.stack([m[:, 0, 2] - m[:, 2, 0], m[:, 0, 1] + m[:, 1, 0], 1 + m11 - m00 - m22, m[:, 1, 2] + m[:, 2, 1]], -1),
            np.stack([m[:, 1, 0] - m[:, 0, 1], m[:, 0, 2] + m[:, 2, 0], m[:, 1, 2] + m[:, 2, 1], 1 + m22 - m00 - m11], -1),
        ],
        axis=1,
    )
    pivots = np.stack([1 + tr, 1 + m00 - m11 - m22, 1 + m11 - m00 - m22, 1 + m22 - m00 - m11], -1)
    best = np.argmax(pivots, axis=-1)
    q = cands[np.arange(len(m)), best]
    q = quat_normalize(q)
    q[q[:, 0] < 0] *= -1
    return q.reshape(batch + (4,))


def so3_exp(theta):
    """Unit quaternion of the rotation vector ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    angle = np.linalg.norm(theta, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < 1e-8
    # sin(a/2)/a, series below 1e-8
    k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    return np.concatenate([np.cos(half), k * theta], axis=-1)


def so3_log(q):
    """Rotation vector of a unit quaternion, angle in [0, pi]."""
    q = quat_normalize(q)
    q = np.where(q[..., :1] < 0, -q, q)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., :1])
    small = s < 1e-12
    return np.where(small, 2.0 * v, v * angle / np.where(small, 1.0, s))


def quat_angle(q):
    """Geodesic angle (radians, in [0, pi]) of the rotation ``q``."""
    q = quat_normalize(q)
    s = np.linalg.norm(q[..., 1:], axis=-1)
    return 2.0 * np.arctan2(s, np.abs(q[..., 0]))


def rotation_about(axis, degrees):
    axis = np.asarray(axis, dtype=np.float64)
    return so3_exp(axis / np.linalg.norm(axis) * np.deg2rad(degrees))


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    x, y, z = np.moveaxis(v, -1, 0)
    o = np.zeros_like(x)
    return np.stack([np.stack([o, -z, y], -1), np.stack([z, o, -x], -1), np.stack([-y, x, o], -1)], -2)


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=np.float64)
        return cls(rotmat_to_quat(T[:3, :3]), T[:3, 3])

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def position(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix.T + self.translation

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first."""
        q = quat_mul(self.rotation, other.rotation)
        t = self.rotation_matrix @ other.translation + self.translation
        return Pose(q, t)

    __matmul__ = compose

    def inverse(self) -> Pose:
        q = quat_conj(self.rotation)
        return Pose(q, -(quat_to_rotmat(q) @ self.translation))

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """Rotation and translation mapping world points into the camera frame."""
        Rt = self.rotation_matrix.T
        return Rt, -Rt @ self.translation

    def retract(self, dtheta=None, dt=None) -> Pose:
        """Right-perturb the rotation by ``exp(dtheta)``; add ``dt`` to the translation."""
        q = self.rotation if dtheta is None else quat_mul(self.rotation, so3_exp(dtheta))
        t = self.translation if dt is None else self.translation + np.asarray(dt, dtype=np.float64)
        return Pose(q, t)

    def angle_to(self, other: Pose) -> float:
        return float(quat_angle(quat_mul(quat_conj(self.rotation), other.rotation)))

    def distance_to(self, other: Pose) -> float:
        return float(np.linalg.norm(self.translation - other.translation))

    def allclose(self, other: Pose, atol: float = 1e-12) -> bool:
        return self.angle_to(other) <= atol and self.distance_to(other) <= atol

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(self.translation.tolist()) + tuple(self.rotation.tolist())

    def __repr__(self) -> str:
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"Pose(q={q}, t={t})"


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def constant_velocity_init(p_prev: Pose, p_prev2: Pose | None) -> Pose:
    """Extrapolate the last inter-frame motion one step forward.

    Translation advances by the previous displacement; rotation advances by
    the previous relative rotation ``q2^-1 q1`` applied on the right.
    """
    if p_prev2 is None:
        return p_prev
    delta_q = quat_mul(quat_conj(p_prev2.rotation), p_prev.rotation)
    q = quat_mul(p_prev.rotation, delta_q)
    t = p_prev.translation + (p_prev.translation - p_prev2.translation)
    return Pose(q, t)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def scaled(self, divisor: int) -> CameraIntrinsics:
        """Intrinsics for images subsampled by taking every ``divisor``-th pixel."""
        if divisor == 1:
            return self
        return CameraIntrinsics(
            self.fx / divisor,
            self.fy / divisor,
            self.cx / divisor,
            self.cy / divisor,
            (self.width + divisor - 1) // divisor,
            (self.height + divisor - 1) // divisor,
            self.depth_scale,
        )

    def project(self, points_cam) -> np.ndarray:
        p = np.asarray(points_cam, dtype=np.float64)
        return np.stack(
            [self.fx * p[..., 0] / p[..., 2] + self.cx, self.fy * p[..., 1] / p[..., 2] + self.cy], axis=-1
        )

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) camera-frame rays with unit z through every pixel center."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)], axis=-1)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "depth_scale": self.depth_scale,
        }


def backproject(depth, intrinsics: CameraIntrinsics, pose: Pose | None = None) -> np.ndarray:
    """Lift a depth map to 3D points; pixels with depth <= 0 become NaN."""
    depth = np.asarray(depth, dtype=np.float64)
    pts = intrinsics.pixel_rays() * depth[..., None]
    if pose is not None:
        pts = pose.apply(pts)
    pts[~(depth > 0)] = np.nan
    return pts


def normals_from_points(points, camera_center=None) -> np.ndarray:
    """Unit normals of a structured point map by finite differences.

    Central differences in the interior and one-sided ones on the border.
    A pixel is undefined (NaN) if it or any 8-neighbour is undefined, or if
    the cross product vanishes. Normals face the camera.
    """
    P = np.asarray(points, dtype=np.float64)
    H, W = P.shape[:2]
    valid = np.isfinite(P).all(axis=-1)

    dx = np.empty_like(P)
    dy = np.empty_like(P)
    if W > 1:
        dx[:, 1:-1] = 0.5 * (P[:, 2:] - P[:, :-2])
        dx[:, 0] = P[:, 1] - P[:, 0]
        dx[:, -1] = P[:, -1] - P[:, -2]
    else:
        dx[:] = np.nan
    if H > 1:
        dy[1:-1] = 0.5 * (P[2:] - P[:-2])
        dy[0] = P[1] - P[0]
        dy[-1] = P[-1] - P[-2]
    else:
        dy[:] = np.nan

    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1)

    # 8-neighbourhood validity
    padded = np.pad(valid, 1, constant_values=True)
    ok = np.ones_like(valid)
    for oy in range(3):
        for ox in range(3):
            ok &= padded[oy : oy + H, ox : ox + W]
    ok &= valid & np.isfinite(norm) & (norm > 0)

    n = n / np.where(ok, norm, 1.0)[..., None]
    view = P if camera_center is None else P - np.asarray(camera_center, dtype=np.float64)
    flip = np.einsum("...i,...i->...", n, view) > 0
    n[flip] *= -1
    n[~ok] = np.nan
    return n


def gt_normal_from_depth(point_map, camera_center=None) -> np.ndarray:
    return normals_from_points(point_map, camera_center)


def frame_from_normal(n) -> np.ndarray:
    """Quaternions whose rotation matrix has ``n`` as its third column."""
    n = np.asarray(n, dtype=np.float64)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    helper = np.zeros_like(n)
    use_x = np.abs(n[..., 0]) < 0.9
    helper[use_x, 0] = 1.0
    helper[~use_x, 1] = 1.0
    tu = np.cross(helper, n)
    tu /= np.linalg.norm(tu, axis=-1, keepdims=True)
    tv = np.cross(n, tu)
    R = np.stack([tu, tv, n], axis=-1)
    return rotmat_to_quat(R)
