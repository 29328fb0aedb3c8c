"""Loss terms, their adjoints and the tracking / mapping / BA objectives.

Every term is a mean over the pixels of its mask. Functions that take
``return_grad=True`` also return the gradient of the term with respect to
their first argument.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.ndimage import correlate1d

from .rasterizer import BufferAdjoints, RenderOutput

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class ExposureParams:
    a: float = 0.0  # log gain
    b: float = 0.0  # bias

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b])


def exposure_adjust(color, e: ExposureParams | None) -> np.ndarray:
    if e is None:
        return color
    return np.exp(e.a) * color + e.b


def _count(mask) -> int:
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise ValueError("no valid pixels")
    return n


def loss_color_l1(rendered, gt, mask, return_grad=False):
    n = _count(mask) * rendered.shape[-1]
    diff = (rendered - gt) * mask[..., None]
    val = float(np.abs(diff).sum() / n)
    if not return_grad:
        return val
    return val, np.sign(diff) / n


def loss_p2point(depth, depth_gt, mask, return_grad=False):
    n = _count(mask)
    diff = (depth - depth_gt) * mask
    val = float(np.abs(diff).sum() / n)
    if not return_grad:
        return val
    return val, np.sign(diff) / n


def loss_p2plane(points, points_gt, normals_gt, mask, return_grad=False):
    """Mean |(x_GT - x) . N_GT| over ``mask``; the gradient is w.r.t. ``points``."""
    n = _count(mask)
    with np.errstate(invalid="ignore"):
        r = np.einsum("...i,...i->...", points_gt - points, normals_gt)
    r = np.where(mask, r, 0.0)
    val = float(np.abs(r).sum() / n)
    if not return_grad:
        return val
    g = -(np.sign(r) / n)[..., None] * np.where(mask[..., None], normals_gt, 0.0)
    return val, g


def loss_p2plane_depth(depth, depth_gt, rays, normals_gt, mask, return_grad=False):
    """Point-to-plane with both point maps back-projected along the same rays.

    Then (x_GT - x) . N = (D_GT - D) (ray . N); the gradient is w.r.t. ``depth``.
    """
    n = _count(mask)
    with np.errstate(invalid="ignore"):
        proj = np.einsum("...i,...i->...", rays, normals_gt)
    proj = np.where(mask, proj, 0.0)
    r = (depth_gt - depth) * proj
    r = np.where(mask, r, 0.0)
    val = float(np.abs(r).sum() / n)
    if not return_grad:
        return val
    return val, -np.sign(r) * proj / n


def loss_distortion(distortion, mask, return_grad=False):
    n = _count(mask)
    val = float(np.where(mask, distortion, 0.0).sum() / n)
    if not return_grad:
        return val
    return val, mask / n


def loss_normal_consistency(out: RenderOutput, normal_gt, mask, return_grad=False):
    """Mean of sum_i w_i (1 - n_i . N_GT), evaluated as W - N . N_GT from the blended buffers."""
    n = _count(mask)
    ngt = np.where(mask[..., None], normal_gt, 0.0)
    per_px = out.weight - np.einsum("...i,...i->...", out.normal, ngt)
    val = float(np.where(mask, per_px, 0.0).sum() / n)
    if not return_grad:
        return val
    return val, (mask / n, -ngt / n)


# SSIM


def _gauss_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _blur(img):
    w = _gauss_window()
    out = correlate1d(img, w, axis=0, mode="constant")
    return correlate1d(out, w, axis=1, mode="constant")


def ssim(x, y, return_grad=False):
    """Mean SSIM over pixels and channels (Gaussian window, zero padding).

    With ``return_grad`` also returns d mean-SSIM / d x.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("image shapes differ")
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise ValueError("image smaller than SSIM window")
    shape = x.shape
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    mu_x, mu_y = _blur(x), _blur(y)
    m_xx, m_yy, m_xy = _blur(x * x), _blur(y * y), _blur(x * y)
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * (m_xy - mu_x * mu_y) + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = (m_xx - mu_x**2) + (m_yy - mu_y**2) + SSIM_C2
    s = a1 * a2 / (b1 * b2)
    val = float(s.mean())
    if not return_grad:
        return val
    g = 1.0 / s.size
    d_mu = g * (2 * mu_y * (a2 - a1) / (b1 * b2) - 2 * mu_x * s / b1 + 2 * mu_x * s / b2)
    d_mxx = g * (-s / b2)
    d_mxy = g * (2 * a1 / (b1 * b2))
    # the symmetric window with zero padding is its own adjoint
    grad = _blur(d_mu) + 2 * x * _blur(d_mxx) + y * _blur(d_mxy)
    return val, grad.reshape(shape)


def loss_dssim(rendered, gt, return_grad=False):
    if not return_grad:
        return 1.0 - ssim(rendered, gt)
    val, g = ssim(rendered, gt, return_grad=True)
    return 1.0 - val, -g


# objectives


@dataclass(frozen=True)
class LossWeights:
    color_l1: float = 1.0
    dssim: float = 0.0
    p2point: float = 1.0
    p2plane: float = 1.0
    distortion: float = 0.0
    normal: float = 0.0

    def depth_relative(self, scale: float) -> LossWeights:
        """Measure the point-to-point and point-to-plane distances in units of ``scale``.

        The distortion weight is left alone: it already comes with its own
        large multiplier, and rescaling it as well lets it swamp the colour term.
        """
        return replace(self, p2point=self.p2point / scale, p2plane=self.p2plane / scale)


TRACKING_WEIGHTS = LossWeights()


def mapping_weights(lam: float = 0.2, alpha: float = 1000.0, beta: float = 0.05) -> LossWeights:
    return LossWeights(color_l1=1.0 - lam, dssim=lam, p2point=1.0, p2plane=0.0, distortion=alpha, normal=beta)


def ba_weights(alpha: float = 1000.0, beta: float = 0.05) -> LossWeights:
    return LossWeights(color_l1=1.0, dssim=0.0, p2point=1.0, p2plane=1.0, distortion=alpha, normal=beta)


TERMS = ("color_l1", "dssim", "p2point", "p2plane", "distortion", "normal")


@dataclass
class LossBreakdown:
    color_l1: float = 0.0
    dssim: float = 0.0
    p2point: float = 0.0
    p2plane: float = 0.0
    distortion: float = 0.0
    normal: float = 0.0
    total: float = 0.0
    pixel_mask: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def combine(cls, weights: LossWeights, pixel_mask=None, **terms) -> LossBreakdown:
        b = cls(**terms, pixel_mask=pixel_mask)
        b.total = float(sum(getattr(weights, t) * getattr(b, t) for t in TERMS))
        return b

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("pixel_mask")
        return d


@dataclass
class LossResult:
    breakdown: LossBreakdown
    adjoints: BufferAdjoints
    exposure_grad: np.ndarray  # d total / d (a, b)


def evaluate_loss(out: RenderOutput, frame, weights: LossWeights, mask, exposure: ExposureParams | None = None,
                  normal_mask=None) -> LossResult:
    """Weighted loss of a render against ``frame`` plus the adjoints of every buffer.

    ``mask`` selects pixels for the colour and depth terms; the normal-based
    terms (point-to-plane, normal consistency) use ``normal_mask`` (defaults
    to ``mask`` restricted to pixels with a defined GT normal).
    """
    H, W = frame.shape
    if normal_mask is None:
        normal_mask = mask & frame.normal_valid
    gain = 1.0 if exposure is None else float(np.exp(exposure.a))
    color = exposure_adjust(out.color, exposure)
    terms: dict[str, float] = {}
    g_color = np.zeros((H, W, 3))
    g_depth = np.zeros((H, W))
    adj = BufferAdjoints()

    if weights.color_l1:
        terms["color_l1"], g = loss_color_l1(color, frame.color, mask, return_grad=True)
        g_color += weights.color_l1 * g
    if weights.dssim:
        terms["dssim"], g = loss_dssim(color, frame.color, return_grad=True)
        g_color += weights.dssim * g
    if weights.p2point:
        terms["p2point"], g = loss_p2point(out.depth, frame.depth, mask, return_grad=True)
        g_depth += weights.p2point * g
    if weights.p2plane and normal_mask.any():
        terms["p2plane"], g = loss_p2plane_depth(out.depth, frame.depth, frame.intrinsics.pixel_rays(),
                                                 frame.normals, normal_mask, return_grad=True)
        g_depth += weights.p2plane * g
    if weights.distortion:
        terms["distortion"], g = loss_distortion(out.distortion, mask, return_grad=True)
        adj.distortion = weights.distortion * g
    if weights.normal and normal_mask.any():
        terms["normal"], (g_w, g_n) = loss_normal_consistency(out, frame.normals, normal_mask, return_grad=True)
        adj.weight = weights.normal * g_w
        adj.normal = weights.normal * g_n

    adj.color = gain * g_color
    adj.depth = g_depth
    if exposure is None:
        exp_grad = np.zeros(2)
    else:
        exp_grad = np.array([float(np.sum(g_color * gain * out.color)), float(np.sum(g_color))])
    return LossResult(LossBreakdown.combine(weights, pixel_mask=mask, **terms), adj, exp_grad)


def tracking_mask(out: RenderOutput, frame, silhouette_threshold: float = 0.99) -> np.ndarray:
    return frame.valid_depth & (out.silhouette > silhouette_threshold)


def tracking_loss(out: RenderOutput, frame, exposure: ExposureParams | None = None,
                  silhouette_threshold: float = 0.99, weights: LossWeights = TRACKING_WEIGHTS) -> LossResult:
    return evaluate_loss(out, frame, weights, tracking_mask(out, frame, silhouette_threshold), exposure)


def mapping_loss(out: RenderOutput, frame, lam: float = 0.2, alpha: float = 1000.0, beta: float = 0.05,
                 weights: LossWeights | None = None) -> LossResult:
    return evaluate_loss(out, frame, weights or mapping_weights(lam, alpha, beta), frame.valid_depth)


def ba_loss(out: RenderOutput, frame, alpha: float = 1000.0, beta: float = 0.05,
            weights: LossWeights | None = None) -> LossResult:
    return evaluate_loss(out, frame, weights or ba_weights(alpha, beta), frame.valid_depth)
