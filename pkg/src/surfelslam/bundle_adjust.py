"""Joint refinement of keyframe poses and the map."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gaussians import GaussianMap
from .geometry import Pose
from .mapping import GaussianOptimizer, KeyframeCandidate, MappingConfig, keyframe_probabilities, sample_keyframes
from .objectives import LossWeights, ba_loss, ba_weights
from .optim import Adam
from .rasterizer import DEFAULT_SETTINGS, RenderSettings, render, render_backward
from .tracking import TrackingConfig, body_gradients, body_step


@dataclass
class BaConfig:
    enabled: bool = True
    period: int = 100  # tracked frames between runs
    iters: int = 200
    n_keyframes: int = 8
    pose_lr_scale: float = 0.5  # relative to the tracking rates
    map_lr_scale: float = 1.0  # relative to the mapping rates

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("BA period must be >= 1")
        if self.iters < 1:
            raise ValueError("BA iterations must be >= 1")


@dataclass
class BaResult:
    keyframes: list[int]
    pre_loss: float
    post_loss: float
    poses: dict[int, Pose] = field(default_factory=dict)
    skipped: int = 0

    def to_dict(self) -> dict:
        return {"keyframes": self.keyframes, "pre_loss": self.pre_loss, "post_loss": self.post_loss,
                "skipped": self.skipped}


def ba_loss_weights(config: MappingConfig, scene_scale: float = 1.0) -> LossWeights:
    w = ba_weights(config.alpha, config.beta)
    return w.depth_relative(scene_scale) if config.depth_relative else w


def batch_loss(gmap: GaussianMap, keyframes: list[KeyframeCandidate], weights: LossWeights,
               settings: RenderSettings = DEFAULT_SETTINGS) -> float:
    total = 0.0
    for kf in keyframes:
        out = render(gmap, kf.frame.intrinsics, kf.pose, settings)
        total += ba_loss(out, kf.frame, weights=weights).breakdown.total
    return total


def run_ba(gmap: GaussianMap, candidates: list[KeyframeCandidate], config: BaConfig, mapping: MappingConfig,
           tracking: TrackingConfig, rng_seed, scene_scale: float = 1.0, anchor_index: int = 0,
           settings: RenderSettings = DEFAULT_SETTINGS) -> BaResult:
    """Optimise the map and the poses of a sampled keyframe batch together.

    The candidate with ``anchor_index`` fixes the gauge: it is always part of
    the batch and its pose never changes. Poses are updated in place on the
    candidates; the returned ``poses`` maps frame index to new pose.
    """
    if len(candidates) < 2:
        raise ValueError("bundle adjustment needs at least two keyframes")
    rng = np.random.default_rng(rng_seed)
    latest = max(candidates, key=lambda c: c.frame_index)
    others = [c for c in candidates if c is not latest]
    probs = keyframe_probabilities(others, latest.pose, latest.frame_index, mapping.s, mapping.p_c, mapping.k)
    batch = sample_keyframes(others, probs, config.n_keyframes, rng) + [latest]
    if not any(c.frame_index == anchor_index for c in batch):
        batch += [c for c in candidates if c.frame_index == anchor_index]
    batch.sort(key=lambda c: c.frame_index)

    weights = ba_loss_weights(mapping, scene_scale)
    pre = batch_loss(gmap, batch, weights, settings)
    map_opt = GaussianOptimizer(mapping, scene_scale, config.map_lr_scale)
    pose_opts = {
        c.frame_index: Adam({"rot": tracking.lr_rotation * config.pose_lr_scale,
                             "trans": tracking.lr_translation * scene_scale * config.pose_lr_scale},
                            betas=tracking.betas)
        for c in batch
    }
    pivots: dict[int, np.ndarray] = {}
    order = np.concatenate([rng.permutation(len(batch)) for _ in range(-(-config.iters // len(batch)))])
    skipped = 0
    for it in range(config.iters):
        kf = batch[order[it]]
        out = render(gmap, kf.frame.intrinsics, kf.pose, settings)
        try:
            res = ba_loss(out, kf.frame, weights=weights)
        except ValueError:
            skipped += 1
            continue
        if not math.isfinite(res.breakdown.total):
            skipped += 1
            continue
        fixed = kf.frame_index == anchor_index
        grads = render_backward(gmap, kf.frame.intrinsics, kf.pose, out, res.adjoints, pose_grad=not fixed)
        map_opt.step(gmap, grads)
        if not fixed:
            if kf.frame_index not in pivots:
                valid = kf.frame.valid_depth
                pivots[kf.frame_index] = np.array([0.0, 0.0, float(np.median(kf.frame.depth[valid]))])
            pivot = pivots[kf.frame_index]
            g_rot, g_trans = body_gradients(kf.pose, grads.pose_rotation, grads.pose_translation, pivot)
            upd = pose_opts[kf.frame_index].step({"rot": g_rot, "trans": g_trans})
            kf.pose = body_step(kf.pose, upd["rot"], upd["trans"], pivot)
    post = batch_loss(gmap, batch, weights, settings)
    return BaResult([c.frame_index for c in batch], pre, post, {c.frame_index: c.pose for c in batch}, skipped)
