"""Analytic textured scenes and camera paths for synthetic RGB-D sequences.

Depth comes from exact ray/surface intersection, never from the splat
renderer, so it can serve as an independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frame import Frame
from .geometry import CameraIntrinsics, Pose, rotmat_to_quat

DEFAULT_INTRINSICS = CameraIntrinsics(100.0, 100.0, 79.5, 59.5, 160, 120, depth_scale=500000.0)


class ProceduralTexture:
    """Smooth RGB pattern: a few random plane waves per channel, in [0.1, 0.9]."""

    def __init__(self, wavelength: float, seed: int = 0, n_waves: int = 4):
        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=(3, n_waves, 3))
        self.dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
        # wavelengths spread over one octave either side of the nominal one
        self.freqs = 2 * np.pi / (wavelength * 2.0 ** rng.uniform(-1, 1, size=(3, n_waves)))
        self.phases = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
        self.amps = rng.uniform(0.5, 1.0, size=(3, n_waves))
        self.amps *= 0.4 / self.amps.sum(axis=1, keepdims=True)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        proj = np.einsum("...i,cki->...ck", points, self.dirs)
        waves = self.amps * np.sin(self.freqs * proj + self.phases)
        return 0.5 + waves.sum(axis=-1)


@dataclass
class SphereBore:
    """Camera inside a hollow sphere (a closed tube segment seen from within)."""

    radius: float = 0.05

    @property
    def scale(self) -> float:
        return self.radius

    def intersect(self, origin, dirs) -> np.ndarray:
        # |o + t d|^2 = r^2, far root (the camera is inside)
        a = np.einsum("...i,...i->...", dirs, dirs)
        b = 2 * np.einsum("...i,i->...", dirs, origin)
        c = origin @ origin - self.radius**2
        disc = b * b - 4 * a * c
        with np.errstate(invalid="ignore"):
            t = (-b + np.sqrt(disc)) / (2 * a)
        return np.where(disc >= 0, t, np.nan)

    def trajectory(self, n_frames: int) -> list[Pose]:
        """Circle of radius r/5 in the plane z = -0.3 r, looking at a point 0.8 r down the axis."""
        r = self.radius
        target = np.array([0.0, 0.0, 0.8 * r])
        poses = []
        for i in range(n_frames):
            th = 2 * np.pi * i / n_frames
            c = np.array([0.2 * r * np.cos(th), 0.2 * r * np.sin(th), -0.3 * r])
            poses.append(look_at(c, target))
        return poses


@dataclass
class WavyPlane:
    """Height field z = z0 + A sin(2 pi x / L) cos(2 pi y / L)."""

    z0: float = 1.0
    amplitude: float = 0.08
    wavelength: float = 0.5

    @property
    def scale(self) -> float:
        return self.z0

    def height(self, x, y):
        k = 2 * np.pi / self.wavelength
        return self.z0 + self.amplitude * np.sin(k * x) * np.cos(k * y)

    def intersect(self, origin, dirs) -> np.ndarray:
        k = 2 * np.pi / self.wavelength
        t = (self.z0 - origin[2]) / dirs[..., 2]
        for _ in range(50):
            x = origin[0] + t * dirs[..., 0]
            y = origin[1] + t * dirs[..., 1]
            f = origin[2] + t * dirs[..., 2] - self.height(x, y)
            dh = self.amplitude * k * (np.cos(k * x) * np.cos(k * y) * dirs[..., 0]
                                       - np.sin(k * x) * np.sin(k * y) * dirs[..., 1])
            step = f / (dirs[..., 2] - dh)
            t = t - step
            if np.max(np.abs(step)) < 1e-15:
                break
        return t

    def trajectory(self, n_frames: int) -> list[Pose]:
        poses = []
        for i in range(n_frames):
            s = i / max(n_frames - 1, 1)
            c = np.array([0.2 * s, 0.05 * np.sin(np.pi * s), 0.0])
            poses.append(look_at(c, c + np.array([0.05 * s, 0.0, 1.0])))
        return poses


@dataclass
class TwoPlaneStep:
    """Plane at z_left for x < edge and z_right for x >= edge."""

    z_left: float = 1.0
    z_right: float = 0.8
    edge: float = 0.0

    @property
    def scale(self) -> float:
        return self.z_left

    def intersect(self, origin, dirs) -> np.ndarray:
        t_l = (self.z_left - origin[2]) / dirs[..., 2]
        t_r = (self.z_right - origin[2]) / dirs[..., 2]
        x_l = origin[0] + t_l * dirs[..., 0]
        x_r = origin[0] + t_r * dirs[..., 0]
        hit_l = np.where((x_l < self.edge) & (t_l > 0), t_l, np.inf)
        hit_r = np.where((x_r >= self.edge) & (t_r > 0), t_r, np.inf)
        t = np.minimum(hit_l, hit_r)
        return np.where(np.isfinite(t), t, np.nan)

    def trajectory(self, n_frames: int) -> list[Pose]:
        return [Pose(translation=[0.1 * i / max(n_frames - 1, 1) - 0.05, 0.0, 0.0]) for i in range(n_frames)]


SCENES = {"sphere": SphereBore, "wavy": WavyPlane, "step": TwoPlaneStep}


def look_at(center, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``center`` with +z towards ``target`` (image y roughly along -up)."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross([1.0, 0.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(rotmat_to_quat(np.stack([x, y, z], axis=-1)), center)


def make_scene(name: str, **kwargs):
    if name not in SCENES:
        raise ValueError(f"unknown scene {name!r}")
    return SCENES[name](**kwargs)


def render_analytic(scene, texture, intrinsics: CameraIntrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Exact colour and depth (camera z, 0 where the ray misses) of ``scene``."""
    rays = intrinsics.pixel_rays() @ pose.rotation_matrix.T
    depth = scene.intersect(pose.translation, rays)
    ok = np.isfinite(depth) & (depth > 0)
    depth = np.where(ok, depth, 0.0)
    pts = pose.translation + depth[..., None] * rays
    color = np.where(ok[..., None], np.clip(texture(pts), 0.0, 1.0), 0.0)
    return color, depth


def quantize(color, depth, depth_scale: float):
    """Round to what 8-bit colour / 16-bit depth images can hold."""
    color_q = np.round(np.clip(color, 0, 1) * 255) / 255
    depth_q = np.round(depth * depth_scale)
    if depth_q.max() > 65535:
        raise ValueError("depth exceeds the 16-bit range; lower depth_scale")
    return color_q, depth_q / depth_scale


def make_frames(scene, n_frames: int, intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS, seed: int = 0,
                poses: list[Pose] | None = None, quantized: bool = True) -> list[Frame]:
    texture = ProceduralTexture(wavelength=0.3 * scene.scale, seed=seed)
    poses = scene.trajectory(n_frames) if poses is None else poses
    frames = []
    for i, pose in enumerate(poses):
        color, depth = render_analytic(scene, texture, intrinsics, pose)
        if quantized:
            color, depth = quantize(color, depth, intrinsics.depth_scale)
        frames.append(Frame(i, color, depth, intrinsics, gt_pose=pose, timestamp=float(i)))
    return frames


def synth_generate(scene: str, out_dir, n_frames: int = 50, intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
                   rng_seed: int = 0, **scene_kwargs):
    """Write a synthetic sequence in the on-disk dataset layout; returns the directory."""
    from .dataset import write_dataset

    frames = make_frames(make_scene(scene, **scene_kwargs), n_frames, intrinsics, seed=rng_seed)
    return write_dataset(out_dir, frames, intrinsics)
