"""Map export (ASCII PLY) and image dumps of rendered views."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .gaussians import GaussianMap, logit
from .geometry import CameraIntrinsics, Pose
from .rasterizer import DEFAULT_SETTINGS, RenderSettings, render

PLY_PROPERTIES = ("x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "opacity", "scale_u", "scale_v",
                  "rot_w", "rot_x", "rot_y", "rot_z")

DEPTH_COLORMAP = "turbo"


def export_map_ply(gmap: GaussianMap, path) -> Path:
    """Write one vertex per surfel; colours are floats in [0, 1], scales in metres."""
    if len(gmap) == 0:
        raise ValueError("empty map")
    path = Path(path)
    cols = np.column_stack([
        gmap.positions, gmap.normals, np.clip(gmap.colors, 0.0, 1.0), gmap.opacities, gmap.scales, gmap.rotations,
    ])
    header = ["ply", "format ascii 1.0", f"element vertex {len(gmap)}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    body = "\n".join(" ".join(f"{v:.9g}" for v in row) for row in cols)
    try:
        path.write_text("\n".join(header) + "\n" + body + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def read_ply(path) -> dict[str, np.ndarray]:
    """Vertex properties of an ASCII PLY file written by :func:`export_map_ply`."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    names, n, i = [], 0, 1
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[0] == "property":
            names.append(parts[-1])
        elif parts[0] == "format" and parts[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        i += 1
    data = np.loadtxt(lines[i + 1 : i + 1 + n], dtype=np.float64, ndmin=2).reshape(n, len(names))
    return {name: data[:, k] for k, name in enumerate(names)}


def load_map_ply(path) -> GaussianMap:
    v = read_ply(path)
    stack = lambda *keys: np.column_stack([v[k] for k in keys])  # noqa: E731
    return GaussianMap(
        positions=stack("x", "y", "z"),
        rotations=stack("rot_w", "rot_x", "rot_y", "rot_z"),
        log_scales=np.log(stack("scale_u", "scale_v")),
        opacity_logits=logit(np.clip(v["opacity"], 1e-6, 1 - 1e-6)),
        colors=stack("red", "green", "blue"),
    )


def colorize_depth(depth, depth_range: tuple[float, float], mask=None) -> np.ndarray:
    """8-bit RGB image of ``depth`` through the fixed colormap over ``depth_range``; masked-out pixels are black."""
    lo, hi = depth_range
    t = np.clip((depth - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    rgb = colormaps[DEPTH_COLORMAP](t)[..., :3]
    if mask is not None:
        rgb[~mask] = 0.0
    return np.round(rgb * 255).astype(np.uint8)


def colorize_normals(normals, mask=None) -> np.ndarray:
    """Camera-frame normals, normalised, mapped linearly from [-1, 1] to [0, 255]."""
    n = np.nan_to_num(np.asarray(normals, dtype=np.float64))
    n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    rgb = np.clip((n + 1.0) * 0.5, 0.0, 1.0)
    if mask is not None:
        rgb[~mask] = 0.0
    return np.round(rgb * 255).astype(np.uint8)


def render_views(gmap: GaussianMap, poses: list[Pose], intrinsics: CameraIntrinsics, out_dir,
                 depth_range: tuple[float, float] | None = None, settings: RenderSettings = DEFAULT_SETTINGS,
                 indices=None) -> list[Path]:
    """Write ``color_i.png``, ``depth_i.png`` and ``normal_i.png`` per pose.

    Without ``depth_range`` the colormap spans the 1st to 99th percentile of
    covered depth over all views of this call.
    """
    if len(gmap) == 0:
        raise ValueError("empty map")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write {out_dir}: {exc.strerror}") from exc
    indices = range(len(poses)) if indices is None else indices
    outs = [render(gmap, intrinsics, p, settings) for p in poses]
    masks = [o.silhouette > 0.5 for o in outs]
    if depth_range is None:
        d = np.concatenate([o.depth[m] for o, m in zip(outs, masks)])
        depth_range = (float(np.percentile(d, 1)), float(np.percentile(d, 99))) if d.size else (0.0, 1.0)
    written = []
    for i, o, m in zip(indices, outs, masks):
        images = {
            "color": np.round(np.clip(o.color, 0, 1) * 255).astype(np.uint8),
            "depth": colorize_depth(o.depth, depth_range, m),
            "normal": colorize_normals(o.normal, m),
        }
        for kind, img in images.items():
            path = out_dir / f"{kind}_{i:06d}.png"
            Image.fromarray(img, "RGB").save(path)
            written.append(path)
    return written
