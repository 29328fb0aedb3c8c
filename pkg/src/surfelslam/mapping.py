"""Map growth, keyframe selection and map optimisation with poses held fixed."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .frame import Frame
from .gaussians import GaussianMap, seed_gaussians
from .geometry import Pose, quat_mul, quat_normalize, so3_exp
from .objectives import LossBreakdown, LossWeights, mapping_loss, mapping_weights
from .optim import Adam
from .rasterizer import DEFAULT_SETTINGS, RenderGradients, RenderOutput, RenderSettings, render, render_backward


@dataclass
class MappingConfig:
    k: int = 8  # candidate / expansion period in frames
    n_keyframes: int = 8
    rho_e: float = 0.5
    p_c: float = 0.1
    s: float = 0.2
    depth_margin: float = 0.05  # relative, for the "GT in front of the map" test
    iters: int = 15
    period: int = 1  # map every `period` frames
    first_frame_iters: int = 100
    init_stride: int = 2
    lam: float = 0.2
    alpha: float = 1000.0
    beta: float = 0.05
    lr_position: float = 1e-4  # times the scene scale
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    prune_opacity: float | None = None  # e.g. 0.005; disabled by default
    depth_relative: bool = True  # depth-valued terms in units of the scene scale

    def loss_weights(self, scene_scale: float = 1.0) -> LossWeights:
        w = mapping_weights(self.lam, self.alpha, self.beta)
        return w.depth_relative(scene_scale) if self.depth_relative else w

    def __post_init__(self):
        if not 0 < self.rho_e < 1:
            raise ValueError("rho_e must lie in (0, 1)")
        if not 0 < self.p_c < 1:
            raise ValueError("p_c must lie in (0, 1)")
        if self.n_keyframes < 1:
            raise ValueError("n_keyframes must be >= 1")


@dataclass
class KeyframeCandidate:
    frame_index: int
    pose: Pose
    frame: Frame = field(repr=False)
    probability: float = 0.0


# expansion


def expansion_mask(out: RenderOutput, frame: Frame, rho_e: float = 0.5, depth_margin: float = 0.05) -> np.ndarray:
    """Pixels that need new surfels: unobserved, or observed but with real geometry in front of the map."""
    valid = frame.valid_depth
    unobserved = out.silhouette < rho_e
    in_front = valid & (frame.depth < out.depth - depth_margin * frame.depth) & (out.silhouette > 0.5)
    return valid & (unobserved | in_front)


def expand_gaussians(gmap: GaussianMap, frame: Frame, pose: Pose, mask, stride: int = 2) -> int:
    """Seed surfels at masked pixels (see :func:`seed_gaussians`); returns how many were added."""
    new = seed_gaussians(frame, pose, mask=mask, stride=stride, frame_index=frame.index)
    if len(new):
        gmap.extend(new)
    return len(new)


# keyframe selection


def raw_probability(d: float, r: float, t: float, s: float = 0.2) -> float:
    return sum(math.log2(1.0 + 1.0 / (x + s)) for x in (d, r, t))


def keyframe_probabilities(candidates: list[KeyframeCandidate], current_pose: Pose, current_index: int,
                           s: float = 0.2, p_c: float = 0.1, k: int = 8) -> np.ndarray:
    """Selection probabilities of the candidates; they sum to ``1 - p_c``, the current frame holds ``p_c``.

    Distances are in metres, rotation gaps are geodesic angles in radians and
    time gaps are counted in candidate periods of ``k`` frames.
    """
    if not candidates:
        raise ValueError("no keyframe candidates")
    raw = np.array([
        raw_probability(c.pose.distance_to(current_pose), c.pose.angle_to(current_pose),
                        abs(current_index - c.frame_index) / k, s)
        for c in candidates
    ])
    probs = (1.0 - p_c) * raw / raw.sum()
    for c, p in zip(candidates, probs):
        c.probability = float(p)
    return probs


def sample_keyframes(candidates: list, probabilities, n: int, rng) -> list:
    """Draw ``n`` candidates without replacement by inverting the CDF of the sorted list."""
    if n >= len(candidates):
        return list(candidates)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    p = np.asarray(probabilities, dtype=np.float64)
    order = np.argsort(-p, kind="stable")
    remaining = list(order)
    chosen = []
    for _ in range(n):
        w = p[remaining]
        total = w.sum()
        if total <= 0:
            break
        u = rng.random() * total
        i = int(np.searchsorted(np.cumsum(w), u, side="right"))
        i = min(i, len(remaining) - 1)
        chosen.append(remaining.pop(i))
    return [candidates[i] for i in chosen]


# optimisation


class GaussianOptimizer:
    """Adam over all surfel parameters; tracks map growth and pruning."""

    GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "colors")

    def __init__(self, config: MappingConfig, scene_scale: float = 1.0, lr_scale: float = 1.0):
        c = config
        self.adam = Adam({
            "positions": c.lr_position * scene_scale * lr_scale,
            "rotations": c.lr_rotation * lr_scale,
            "log_scales": c.lr_log_scale * lr_scale,
            "opacity_logits": c.lr_opacity * lr_scale,
            "colors": c.lr_color * lr_scale,
        })
        self.size = None

    def sync(self, gmap: GaussianMap) -> None:
        if self.size is not None and len(gmap) > self.size:
            self.adam.extend(len(gmap) - self.size)
        self.size = len(gmap)

    def keep(self, mask) -> None:
        self.adam.keep(mask)
        self.size = int(np.count_nonzero(mask))

    def step(self, gmap: GaussianMap, grads: RenderGradients) -> None:
        self.sync(gmap)
        upd = self.adam.step(grads.gaussian_groups())
        gmap.positions = gmap.positions + upd["positions"]
        gmap.rotations = quat_normalize(quat_mul(gmap.rotations, so3_exp(upd["rotations"])))
        gmap.log_scales = gmap.log_scales + upd["log_scales"]
        gmap.opacity_logits = gmap.opacity_logits + upd["opacity_logits"]
        gmap.colors = gmap.colors + upd["colors"]


@dataclass
class MapUpdateResult:
    losses: list[LossBreakdown] = field(default_factory=list)
    skipped: int = 0
    pruned: int = 0

    def to_dict(self) -> dict:
        return {
            "iters": len(self.losses),
            "skipped": self.skipped,
            "pruned": self.pruned,
            "first": self.losses[0].to_dict() if self.losses else None,
            "last": self.losses[-1].to_dict() if self.losses else None,
        }


def map_update(gmap: GaussianMap, keyframes: list[KeyframeCandidate], config: MappingConfig,
               optimizer: GaussianOptimizer | None = None, iters: int | None = None,
               settings: RenderSettings = DEFAULT_SETTINGS, scene_scale: float = 1.0) -> MapUpdateResult:
    """Optimise ``gmap`` in place against the keyframe batch, cycling through it once per iteration."""
    if not keyframes:
        raise ValueError("no keyframes to map")
    opt = optimizer or GaussianOptimizer(config, scene_scale)
    iters = config.iters if iters is None else iters
    weights = config.loss_weights(scene_scale)
    result = MapUpdateResult()
    for it in range(iters):
        kf = keyframes[it % len(keyframes)]
        out = render(gmap, kf.frame.intrinsics, kf.pose, settings)
        try:
            res = mapping_loss(out, kf.frame, weights=weights)
        except ValueError:
            result.skipped += 1
            continue
        if not math.isfinite(res.breakdown.total):
            result.skipped += 1
            continue
        result.losses.append(res.breakdown)
        grads = render_backward(gmap, kf.frame.intrinsics, kf.pose, out, res.adjoints, pose_grad=False)
        opt.step(gmap, grads)
    if config.prune_opacity is not None:
        keep = gmap.opacities >= config.prune_opacity
        result.pruned = int(np.count_nonzero(~keep))
        if result.pruned:
            gmap.keep(keep)
            opt.keep(keep)
    return result
