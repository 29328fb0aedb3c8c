from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..gaussians import Gaussian2D, GaussianMap
from ..geometry import CameraIntrinsics, Pose, quat_to_rotmat
from . import _kernels as K

FILTER_RHO_SCALE = 2.0  # screen-space low-pass filter: exp(-|d|^2 / (2 * 0.5))
BBOX_MARGIN = 0.01  # px, guards the analytic extent against rounding


@dataclass(frozen=True)
class RenderSettings:
    tile_size: int = 16
    # intersections whose kernel value falls below this are ignored; 0 disables
    kernel_cutoff: float = 0.01
    t_min: float = 1e-4
    z_near: float = 1e-3
    eps: float = 1e-8
    silhouette: str = "accumulated"  # or "normalized": sum(w) / (sum(w) + eps)

    @property
    def rho_cut(self) -> float:
        return math.inf if self.kernel_cutoff <= 0 else -2.0 * math.log(self.kernel_cutoff)


DEFAULT_SETTINGS = RenderSettings()


@dataclass
class ProjectedSplats:
    """Per-splat screen-space quantities of the splats surviving the near cull.

    Arrays are in front-to-back order; ``order`` maps back to map indices.
    """

    n_total: int
    order: np.ndarray
    M: np.ndarray  # (n, 3, 3): K @ [s_u R t_u, s_v R t_v, p]
    center_px: np.ndarray
    view_depth: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    cam_normal: np.ndarray
    normal_sign: np.ndarray
    bbox: np.ndarray  # (n, 4) inclusive pixel range x0, x1, y0, y1
    # camera-frame geometry kept for the backward pass
    a_u: np.ndarray
    a_v: np.ndarray
    p: np.ndarray
    n_raw: np.ndarray

    def __len__(self):
        return len(self.order)


@dataclass
class BlendState:
    settings: RenderSettings
    splats: ProjectedSplats
    tile_offsets: np.ndarray | None
    tile_entries: np.ndarray | None
    n_contrib: np.ndarray
    last_pos: np.ndarray
    final_T: np.ndarray
    fingerprint: tuple


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    silhouette: np.ndarray
    weight: np.ndarray  # sum of blending weights
    normal: np.ndarray
    distortion: np.ndarray
    blend_state: BlendState | None = field(default=None, repr=False)

    def intersections(self, x: int, y: int) -> list[dict]:
        """Replay the blending at pixel (x, y): splat id, weight, depth, kernel value, (u, v)."""
        st = self.blend_state
        sp = st.splats
        Mf = sp.M.reshape(-1, 9)
        if st.tile_entries is None:
            ent = np.arange(len(sp))
            s0, s1 = 0, len(sp)
        else:
            ntx = -(-self.depth.shape[1] // st.settings.tile_size)
            t = (y // st.settings.tile_size) * ntx + x // st.settings.tile_size
            ent, s0 = st.tile_entries, st.tile_offsets[t]
            s1 = st.last_pos[y, x] + 1
        T, rows = 1.0, []
        for pos in range(s0, s1):
            j = ent[pos]
            ok, G, u, v, z, _ = K._intersect(Mf, sp.center_px, j, float(x), float(y), st.settings.rho_cut, st.settings.z_near)
            if not ok:
                continue
            a = sp.opacity[j] * G
            rows.append({"splat": int(sp.order[j]), "weight": T * a, "depth": z, "kernel": G, "u": u, "v": v})
            T *= 1.0 - a
            if T < st.settings.t_min:
                break
        return rows


_ADJOINT_FIELDS = ("color", "depth", "silhouette", "normal", "distortion", "weight")


@dataclass
class BufferAdjoints:
    """Upstream gradients of a scalar loss w.r.t. the rendered buffers."""

    color: np.ndarray | None = None
    depth: np.ndarray | None = None
    silhouette: np.ndarray | None = None
    normal: np.ndarray | None = None
    distortion: np.ndarray | None = None
    weight: np.ndarray | None = None  # sum of blending weights, before the silhouette map

    def __add__(self, other: BufferAdjoints) -> BufferAdjoints:
        def add(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return a + b

        return BufferAdjoints(*(add(getattr(self, f), getattr(other, f)) for f in
                                _ADJOINT_FIELDS))

    def scaled(self, k: float) -> BufferAdjoints:
        return BufferAdjoints(*(None if getattr(self, f) is None else k * getattr(self, f) for f in
                                _ADJOINT_FIELDS))


@dataclass
class RenderGradients:
    position: np.ndarray
    rotation: np.ndarray  # right tangent at the current quaternion
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    pose_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pose_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def gaussian_groups(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.position,
            "rotations": self.rotation,
            "log_scales": self.log_scale,
            "opacity_logits": self.opacity_logit,
            "colors": self.color,
        }


def compute_homography(g: Gaussian2D) -> np.ndarray:
    """4x4 map from UV-plane points (u, v, 1, 1) to world points."""
    R = g.rotation_matrix
    s = g.scale_uv
    H = np.zeros((4, 4))
    H[:3, 0] = s[0] * R[:, 0]
    H[:3, 1] = s[1] * R[:, 1]
    H[:3, 3] = g.position
    H[3, 3] = 1.0
    return H


def world_to_screen(intrinsics: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """4x4 map from world points to (x z, y z, z, 1)."""
    Rw, tw = pose.world_to_camera()
    Wm = np.eye(4)
    Wm[:3, :3] = intrinsics.K @ Rw
    Wm[:3, 3] = intrinsics.K @ tw
    return Wm


def ray_splat_intersect(WH: np.ndarray, pixel) -> tuple[float, float, float] | None:
    """Where the pixel's ray crosses the splat plane: (u, v, camera depth).

    Returns None for a ray (nearly) parallel to the splat.
    """
    x, y = float(pixel[0]), float(pixel[1])
    h_u = x * WH[2] - WH[0]
    h_v = y * WH[2] - WH[1]
    den = h_u[0] * h_v[1] - h_u[1] * h_v[0]
    if abs(den) < 1e-12:
        return None
    u = (h_u[1] * h_v[3] - h_u[3] * h_v[1]) / den
    v = (h_u[3] * h_v[0] - h_u[0] * h_v[3]) / den
    z = (WH @ np.array([u, v, 1.0, 1.0]))[2]
    return u, v, z


def splat_weight(u: float, v: float, pixel=None, center_px=None) -> float:
    """Surfel kernel, floored by a screen-space filter of variance 1/2 px^2."""
    g3 = math.exp(-0.5 * (u * u + v * v))
    if pixel is None or center_px is None:
        return g3
    d2 = (pixel[0] - center_px[0]) ** 2 + (pixel[1] - center_px[1]) ** 2
    return max(g3, math.exp(-0.5 * FILTER_RHO_SCALE * d2))


def _bbox(p, a_u, a_v, center, intr: CameraIntrinsics, settings: RenderSettings, scales):
    n = len(p)
    W, H = intr.width, intr.height
    if not math.isfinite(settings.rho_cut):
        return np.tile(np.array([0, W - 1, 0, H - 1], dtype=np.int64), (n, 1))
    r_uv = math.sqrt(settings.rho_cut)
    radius = r_uv * scales.max(axis=1)
    r_filter = math.sqrt(settings.rho_cut / FILTER_RHO_SCALE)

    def extent(lateral, f, c):
        # angular extent of the bounding ball seen along one image axis
        rho = np.hypot(lateral, p[:, 2])
        inside = rho <= radius * (1 + 1e-9)
        with np.errstate(invalid="ignore", divide="ignore"):
            phi = np.arctan2(lateral, p[:, 2])
            beta = np.arcsin(np.clip(radius / np.where(inside, 1.0, rho), 0.0, 1.0))
            lo_ang, hi_ang = phi - beta, phi + beta
            lo = np.where((lo_ang <= -math.pi / 2) | inside, -np.inf, f * np.tan(lo_ang) + c)
            hi = np.where((hi_ang >= math.pi / 2) | inside, np.inf, f * np.tan(hi_ang) + c)
        return lo, hi

    xlo, xhi = extent(p[:, 0], intr.fx, intr.cx)
    ylo, yhi = extent(p[:, 1], intr.fy, intr.cy)
    xlo = np.minimum(xlo, center[:, 0] - r_filter) - BBOX_MARGIN
    xhi = np.maximum(xhi, center[:, 0] + r_filter) + BBOX_MARGIN
    ylo = np.minimum(ylo, center[:, 1] - r_filter) - BBOX_MARGIN
    yhi = np.maximum(yhi, center[:, 1] + r_filter) + BBOX_MARGIN
    box = np.stack(
        [
            np.ceil(np.clip(xlo, -1, W)),
            np.floor(np.clip(xhi, -1, W)),
            np.ceil(np.clip(ylo, -1, H)),
            np.floor(np.clip(yhi, -1, H)),
        ],
        axis=-1,
    ).astype(np.int64)
    box[:, 0] = np.maximum(box[:, 0], 0)
    box[:, 2] = np.maximum(box[:, 2], 0)
    box[:, 1] = np.minimum(box[:, 1], W - 1)
    box[:, 3] = np.minimum(box[:, 3], H - 1)
    return box


def project_splats(gmap: GaussianMap, intrinsics: CameraIntrinsics, pose: Pose,
                   settings: RenderSettings = DEFAULT_SETTINGS) -> ProjectedSplats:
    Rw, tw = pose.world_to_camera()
    Rg = quat_to_rotmat(gmap.rotations)
    scales = gmap.scales
    p = gmap.positions @ Rw.T + tw
    RwRg = np.matmul(Rw, Rg)
    a_u = scales[:, :1] * RwRg[:, :, 0]
    a_v = scales[:, 1:] * RwRg[:, :, 1]
    n_raw = RwRg[:, :, 2]

    keep = p[:, 2] > settings.z_near
    idx = np.nonzero(keep)[0]
    # front to back, index tiebreak (stable sort)
    idx = idx[np.argsort(p[idx, 2], kind="stable")]

    Kmat = intrinsics.K
    p_s, a_u_s, a_v_s, n_s = p[idx], a_u[idx], a_v[idx], n_raw[idx]
    M = np.stack([a_u_s @ Kmat.T, a_v_s @ Kmat.T, p_s @ Kmat.T], axis=-1)
    center = M[:, :2, 2] / M[:, 2:3, 2]
    sign = np.where((n_s * p_s).sum(axis=1) > 0, -1.0, 1.0)
    bbox = _bbox(p_s, a_u_s, a_v_s, center, intrinsics, settings, scales[idx])
    on_screen = (bbox[:, 0] <= bbox[:, 1]) & (bbox[:, 2] <= bbox[:, 3])

    sel = np.nonzero(on_screen)[0]
    return ProjectedSplats(
        n_total=len(gmap),
        order=idx[sel],
        M=np.ascontiguousarray(M[sel]),
        center_px=np.ascontiguousarray(center[sel]),
        view_depth=p_s[sel, 2].copy(),
        opacity=gmap.opacities[idx[sel]],
        color=np.clip(gmap.colors[idx[sel]], 0.0, 1.0),
        cam_normal=np.ascontiguousarray(sign[sel, None] * n_s[sel]),
        normal_sign=sign[sel],
        bbox=np.ascontiguousarray(bbox[sel]),
        a_u=a_u_s[sel],
        a_v=a_v_s[sel],
        p=p_s[sel],
        n_raw=n_s[sel],
    )


def _fingerprint(gmap: GaussianMap, intrinsics: CameraIntrinsics, pose: Pose) -> tuple:
    return (len(gmap), intrinsics, pose.as_tuple(), gmap.checksum())


def _buffers(intrinsics: CameraIntrinsics):
    H, W = intrinsics.height, intrinsics.width
    return (np.zeros((H, W, 3)), np.zeros((H, W)), np.zeros((H, W)), np.zeros((H, W, 3)), np.zeros((H, W)),
            np.zeros((H, W), dtype=np.int64), np.full((H, W), -1, dtype=np.int64), np.ones((H, W)))


def _silhouette(weight, settings: RenderSettings):
    if settings.silhouette == "normalized":
        return weight / (weight + settings.eps)
    return np.clip(weight, 0.0, 1.0)


def render(gmap: GaussianMap, intrinsics: CameraIntrinsics, pose: Pose,
           settings: RenderSettings = DEFAULT_SETTINGS) -> RenderOutput:
    """Tile-based front-to-back blending of all splats seen from ``pose``."""
    if len(gmap) == 0:
        raise ValueError("empty scene")
    sp = project_splats(gmap, intrinsics, pose, settings)
    tile = settings.tile_size
    ntx = -(-intrinsics.width // tile)
    nty = -(-intrinsics.height // tile)
    offsets, entries = K.bin_tiles(sp.bbox, ntx, nty, tile)
    color, depth, weight, normal, dist, n_contrib, last_pos, t_final = _buffers(intrinsics)
    K.forward_tiled(sp.M.reshape(-1, 9), sp.center_px, sp.opacity, sp.color, sp.cam_normal, sp.bbox, offsets,
                    entries, intrinsics.width, intrinsics.height, tile, settings.rho_cut, settings.z_near,
                    settings.t_min, settings.eps, color, depth, weight, normal, dist, n_contrib, last_pos, t_final)
    state = BlendState(settings, sp, offsets, entries, n_contrib, last_pos, t_final,
                       _fingerprint(gmap, intrinsics, pose))
    return RenderOutput(color, depth, _silhouette(weight, settings), weight, normal, dist, state)


def render_reference(gmap: GaussianMap, intrinsics: CameraIntrinsics, pose: Pose,
                     settings: RenderSettings = DEFAULT_SETTINGS) -> RenderOutput:
    """Brute-force renderer: every pixel visits every splat, no tiles, no culling."""
    if len(gmap) == 0:
        raise ValueError("empty scene")
    sp = project_splats(gmap, intrinsics, pose, settings)
    # independent full sort: depth, then map index
    order = np.lexsort((sp.order, sp.view_depth)).astype(np.int64)
    color, depth, weight, normal, dist, n_contrib, last_pos, t_final = _buffers(intrinsics)
    K.forward_reference(sp.M.reshape(-1, 9), sp.center_px, sp.opacity, sp.color, sp.cam_normal, sp.bbox, order,
                        intrinsics.width, intrinsics.height, settings.rho_cut, settings.z_near, settings.t_min,
                        settings.eps, color, depth, weight, normal, dist, n_contrib, last_pos, t_final)
    state = BlendState(settings, sp, None, None, n_contrib, last_pos, t_final, _fingerprint(gmap, intrinsics, pose))
    return RenderOutput(color, depth, _silhouette(weight, settings), weight, normal, dist, state)


def render_backward(gmap: GaussianMap, intrinsics: CameraIntrinsics, pose: Pose, out: RenderOutput,
                    adjoints: BufferAdjoints, *, pose_grad: bool = True) -> RenderGradients:
    """Reverse-mode gradients of ``sum(adjoint * buffer)`` over all buffers."""
    st = out.blend_state
    if st is None or st.tile_entries is None:
        raise ValueError("render output carries no blend state")
    if st.fingerprint != _fingerprint(gmap, intrinsics, pose):
        raise ValueError("blend state does not match the map/pose being differentiated")
    settings, sp = st.settings, st.splats
    H, W = intrinsics.height, intrinsics.width

    def buf(a, shape):
        return np.zeros(shape) if a is None else np.ascontiguousarray(a, dtype=np.float64)

    g_color = buf(adjoints.color, (H, W, 3))
    g_depth = buf(adjoints.depth, (H, W))
    g_normal = buf(adjoints.normal, (H, W, 3))
    g_dist = buf(adjoints.distortion, (H, W))
    g_weight = np.zeros((H, W))
    if adjoints.silhouette is not None:
        if settings.silhouette == "normalized":
            g_weight = adjoints.silhouette * settings.eps / (out.weight + settings.eps) ** 2
        else:
            g_weight = adjoints.silhouette * ((out.weight >= 0) & (out.weight <= 1))
    if adjoints.weight is not None:
        g_weight = g_weight + adjoints.weight
    g_weight = np.ascontiguousarray(g_weight, dtype=np.float64)

    n = len(sp)
    slots = np.zeros((len(st.tile_entries), K.N_SLOT))
    errors = np.zeros(len(st.tile_offsets), dtype=np.int64)
    K.backward_tiled(sp.M.reshape(-1, 9), sp.center_px, sp.opacity, sp.color, sp.cam_normal, sp.bbox,
                     st.tile_offsets, st.tile_entries, W, H, settings.tile_size, settings.rho_cut, settings.z_near,
                     settings.eps, out.depth, out.weight, st.last_pos, st.n_contrib,
                     g_color, g_depth, g_weight, g_normal, g_dist, slots, errors)
    if errors.any():
        raise ValueError("blend state does not match the replayed traversal")
    acc = K.reduce_slots(st.tile_entries, slots, n)

    gM = acc[:, :9].reshape(n, 3, 3)
    gA = np.matmul(intrinsics.K.T, gM)
    g_au, g_av, g_p = gA[:, :, 0], gA[:, :, 1], gA[:, :, 2]
    g_nraw = sp.normal_sign[:, None] * acc[:, 9:12]

    Rw, _ = pose.world_to_camera()
    idx = sp.order
    Rg = quat_to_rotmat(gmap.rotations[idx])
    scales = gmap.scales[idx]
    g_cols = [scales[:, :1] * (g_au @ Rw), scales[:, 1:] * (g_av @ Rw), g_nraw @ Rw]
    local = [np.matmul(g[:, None, :], Rg)[:, 0] for g in g_cols]
    # sum_k e_k x L_k, written out: e0 x L0 = (0, -L0z, L0y), e1 x L1 = (L1z, 0, -L1x), e2 x L2 = (-L2y, L2x, 0)
    g_theta = np.stack(
        [
            local[1][:, 2] - local[2][:, 1],
            local[2][:, 0] - local[0][:, 2],
            local[0][:, 1] - local[1][:, 0],
        ],
        axis=-1,
    )

    N = len(gmap)
    grads = RenderGradients(
        position=np.zeros((N, 3)),
        rotation=np.zeros((N, 3)),
        log_scale=np.zeros((N, 2)),
        opacity_logit=np.zeros(N),
        color=np.zeros((N, 3)),
    )
    grads.position[idx] = g_p @ Rw
    grads.rotation[idx] = g_theta
    grads.log_scale[idx, 0] = (sp.a_u * g_au).sum(axis=1)
    grads.log_scale[idx, 1] = (sp.a_v * g_av).sum(axis=1)
    op = sp.opacity
    grads.opacity_logit[idx] = acc[:, 15] * op * (1.0 - op)
    raw = gmap.colors[idx]
    grads.color[idx] = acc[:, 12:15] * ((raw >= 0.0) & (raw <= 1.0))

    if pose_grad:
        g_rot = (np.cross(g_au, sp.a_u) + np.cross(g_av, sp.a_v) + np.cross(g_nraw, sp.n_raw) + np.cross(g_p, sp.p)).sum(0)
        grads.pose_rotation = g_rot
        grads.pose_translation = -pose.rotation_matrix @ g_p.sum(0)
    return grads
