"""Trajectory and rendering quality metrics."""

from __future__ import annotations

import math

import numpy as np

from .geometry import Pose
from .objectives import ssim

PSNR_CAP = 99.0


def _positions(traj) -> np.ndarray:
    return np.array([p.translation if isinstance(p, Pose) else p for p in traj], dtype=np.float64).reshape(-1, 3)


def rigid_align(src, dst) -> tuple[np.ndarray, np.ndarray]:
    """Rotation R and translation t minimising sum |R src_i + t - dst_i|^2 (no scale)."""
    src, dst = np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def metric_ate(est, gt, align: bool = True) -> float:
    """RMSE of camera positions in millimetres, optionally after rigid alignment of ``est`` onto ``gt``."""
    a, b = _positions(est), _positions(gt)
    if len(a) != len(b):
        raise ValueError(f"trajectory lengths differ: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("empty trajectory")
    if align and len(a) >= 2:
        R, t = rigid_align(a, b)
        a = a @ R.T + t
    return 1000.0 * float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def trajectory_extent(traj) -> float:
    """Largest distance between any two camera positions, in metres."""
    p = _positions(traj)
    if len(p) < 2:
        return 0.0
    d = p[:, None, :] - p[None, :, :]
    return float(np.sqrt((d**2).sum(-1)).max())


def metric_depth_rmse(renders, gts, masks) -> float:
    """Depth RMSE in millimetres over the masked pixels of all frames (depths in metres)."""
    if isinstance(renders, np.ndarray) and renders.ndim == 2:
        renders, gts, masks = [renders], [gts], [masks]
    sq, n = 0.0, 0
    for r, g, m in zip(renders, gts, masks, strict=True):
        r, g, m = np.asarray(r), np.asarray(g), np.asarray(m, dtype=bool)
        if r.shape != g.shape or m.shape != g.shape:
            raise ValueError("depth shapes differ")
        sq += float(np.sum((r[m] - g[m]) ** 2))
        n += int(m.sum())
    if n == 0:
        raise ValueError("empty mask")
    return 1000.0 * math.sqrt(sq / n)


def metric_psnr(render, gt) -> float:
    """PSNR in dB for images in [0, 1]; ``inf`` when identical."""
    mse = float(np.mean((np.asarray(render, dtype=np.float64) - np.asarray(gt, dtype=np.float64)) ** 2))
    return math.inf if mse == 0 else -10.0 * math.log10(mse)


def metric_ssim(render, gt) -> float:
    return ssim(np.clip(render, 0.0, 1.0), gt)


def metric_normal_error(normals, normals_gt, mask) -> float:
    """Mean angle in degrees between rendered and reference normals over ``mask``.

    Rendered normals are blended, so they are normalised first.
    """
    m = np.asarray(mask, dtype=bool) & np.isfinite(normals_gt).all(-1)
    if not m.any():
        raise ValueError("empty mask")
    a = np.asarray(normals, dtype=np.float64)[m]
    b = np.asarray(normals_gt, dtype=np.float64)[m]
    a = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return float(np.degrees(np.arccos(np.clip(np.sum(a * b, -1), -1.0, 1.0))).mean())


def serializable(value: float) -> float:
    """Clamp PSNR-style infinities for JSON output."""
    if math.isinf(value) and value > 0:
        return PSNR_CAP
    return min(value, PSNR_CAP) if math.isfinite(value) else value
